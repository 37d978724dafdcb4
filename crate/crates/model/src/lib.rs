//! Toy-scale style generator, refinement encoder, projection and latent walks,
//! built on a small reverse-mode autodiff graph.

pub mod checkpoint;
pub mod embedders;
pub mod encoder;
pub mod graph;
pub mod nn;
pub mod projection;
pub mod real;
pub mod stylegen;
pub mod tensor;
pub mod toy;

pub use checkpoint::{EncoderCheckpoint, GeneratorCheckpoint};
pub use encoder::{Encoder, EncoderConfig, LossWeights, ProjectionResult};
pub use real::Real;
pub use stylegen::{Discriminator, Generator, GeneratorConfig, Noise, StyleCodes};
pub use tensor::Tensor;

pub type Codes = StyleCodes<f64>;
pub type Gen = Generator<f64>;
pub type Enc = Encoder<f64>;
