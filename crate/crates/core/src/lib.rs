//! Geometric caricature construction: landmark-driven patch exaggeration,
//! Poisson compositing, matting based deblur, occlusion handling, dataset
//! manifests and evaluation metrics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod adapters;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod landmarks;
pub mod matting;
pub mod metrics;
pub mod occlusion;
pub mod pipeline;
pub mod poisson;
pub mod scalar;
pub mod synthetic;

pub use error::{Error, Result};
pub use imaging::{AlphaMatte, BinaryMask, ImageBuffer, Trimap, TrimapLabel};
pub use scalar::{CompensatedSum, Scalar};

pub type Image = ImageBuffer<f64>;
pub type Matte = AlphaMatte<f64>;
pub type Landmarks = landmarks::LandmarkSet<f64>;
pub type Exaggeration = pipeline::ExaggerationConfig<f64>;
pub type Lighting = occlusion::LightingConfig<f64>;
pub type DatasetConfig = dataset::DatasetConfig<f64>;
