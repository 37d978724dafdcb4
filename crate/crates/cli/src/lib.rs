//! `cforge` command line and HTTP service over the caricature pipeline and
//! the toy style generator.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod jobs;
pub mod models;
pub mod service;
