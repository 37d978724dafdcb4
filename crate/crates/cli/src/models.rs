//! Loaded generator/encoder pair and the operations the CLI and the service
//! run on it. Models are immutable once loaded and shared between requests.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cforge_core::imaging::resize_bilinear;
use cforge_core::landmarks::{LandmarkSet, Point2};
use cforge_core::matting::MattingProvider;
use cforge_core::occlusion::{LightingConfig, OcclusionProviders};
use cforge_core::pipeline::{landmark_face_mask, ExaggerationConfig};
use cforge_core::{Error, ImageBuffer, Result};
use cforge_model::encoder::{projection_noise, ProjectionResult};
use cforge_model::projection::{latent_walk, mix_style, project, CaricatureInputs, CaricatureRoute, Walk, WalkSpec};
use cforge_model::{Encoder, EncoderCheckpoint, Generator, GeneratorCheckpoint, StyleCodes, Tensor};

/// Caricature pipeline applied before projecting the caricature side of a walk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    #[default]
    Plain,
    Sunglasses,
    ReadingGlasses,
}

pub struct Models {
    pub generator: Generator<f64>,
    pub encoder: Encoder<f64>,
    pub generator_hash: String,
    pub encoder_hash: String,
}

impl Models {
    /// Loads both checkpoints; the encoder must be bound to this generator.
    pub fn load(generator: &Path, encoder: &Path) -> Result<Self> {
        let generator = GeneratorCheckpoint::load(generator)?.generator::<f64>()?;
        let encoder = EncoderCheckpoint::load(encoder)?
            .encoder(&generator)
            .map_err(|e| Error::Config(format!("checkpoint binding: {e}")))?;
        Self::from_parts(generator, encoder)
    }

    pub fn from_parts(generator: Generator<f64>, encoder: Encoder<f64>) -> Result<Self> {
        encoder
            .compatible_with(&generator)
            .map_err(|e| Error::Config(format!("checkpoint binding: {e}")))?;
        generator.average_codes()?;
        Ok(Self {
            generator_hash: generator.params.hash(),
            encoder_hash: encoder.params.hash(),
            generator,
            encoder,
        })
    }

    pub fn resolution(&self) -> usize {
        self.generator.config.resolution
    }

    /// RGB at the generator resolution.
    pub fn prepare(&self, image: &ImageBuffer<f64>) -> Result<ImageBuffer<f64>> {
        let r = self.resolution();
        let rgb = image.to_rgb();
        if rgb.dims() == (r, r) {
            Ok(rgb)
        } else {
            resize_bilinear(&rgb, r, r)
        }
    }

    pub fn project(&self, image: &ImageBuffer<f64>, iterations: usize) -> Result<ProjectionResult<f64>> {
        project(&self.prepare(image)?, &self.encoder, &self.generator, iterations)
    }

    /// Projects the face and its caricature and walks between them.
    ///
    /// `landmarks` are in the coordinates of `image`; without them the frontal
    /// template is used.
    pub fn walk(
        &self,
        image: &ImageBuffer<f64>,
        landmarks: Option<&LandmarkSet<f64>>,
        route: Route,
        iterations: usize,
        t_values: &[f64],
    ) -> Result<Walk<f64>> {
        let r = self.resolution();
        let prepared = self.prepare(image)?;
        let landmarks = match landmarks {
            Some(lm) => rescale(lm, image.dims(), r)?,
            None => LandmarkSet::template(r, r),
        };
        let segmentation = landmark_face_mask(&landmarks, r, r)?;
        let config = ExaggerationConfig::for_resolution(r);
        let providers = OcclusionProviders::default();
        let lighting = LightingConfig::default();
        let route = match route {
            Route::Plain => CaricatureRoute::Plain,
            Route::Sunglasses => CaricatureRoute::Sunglasses,
            Route::ReadingGlasses => CaricatureRoute::ReadingGlasses {
                providers: &providers,
                lighting: &lighting,
                source: None,
            },
        };
        let inputs = CaricatureInputs {
            landmarks: &landmarks,
            segmentation: &segmentation,
            config: &config,
            matting: &MattingProvider::Baseline,
            route,
        };
        let spec = WalkSpec {
            t_values: t_values.to_vec(),
        };
        latent_walk(&prepared, &inputs, &self.encoder, &self.generator, iterations, &spec)
    }

    /// W+ code of a seeded latent, the same vector at every layer.
    pub fn style(&self, seed: u64) -> Result<StyleCodes<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn(&[1, self.generator.config.d_latent], 1.0, &mut rng);
        let w = self.generator.map_latent(&z)?;
        Ok(StyleCodes::broadcast(&w.data, self.generator.n_styles()))
    }

    pub fn render(&self, codes: &StyleCodes<f64>) -> Result<ImageBuffer<f64>> {
        if codes.n_styles != self.generator.n_styles() || codes.dim != self.generator.config.d_latent {
            return Err(Error::invalid(format!(
                "style codes are {}x{}, generator expects {}x{}",
                codes.n_styles,
                codes.dim,
                self.generator.n_styles(),
                self.generator.config.d_latent
            )));
        }
        self.generator.synthesize(codes, &projection_noise())
    }

    /// Keeps the layers below `crossover` from `codes`, the rest from `style`.
    pub fn mix(&self, codes: &StyleCodes<f64>, style: &StyleCodes<f64>, crossover: usize) -> Result<(StyleCodes<f64>, ImageBuffer<f64>)> {
        if crossover > self.generator.n_styles() {
            return Err(Error::invalid(format!(
                "crossover {crossover} exceeds {} styles",
                self.generator.n_styles()
            )));
        }
        let mixed = mix_style(codes, style, crossover)?;
        let image = self.render(&mixed)?;
        Ok((mixed, image))
    }
}

fn rescale(lm: &LandmarkSet<f64>, (h, w): (usize, usize), r: usize) -> Result<LandmarkSet<f64>> {
    let (sy, sx) = (r as f64 / h as f64, r as f64 / w as f64);
    LandmarkSet::new(lm.points().iter().map(|p| Point2::new(p.x * sx, p.y * sy)).collect())?.bind(r, r)
}
