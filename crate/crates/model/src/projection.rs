//! Projection workflows: real and caricature projection, background
//! blending, latent walks between the two and style mixing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cforge_core::imaging::{alpha_blend, save_image};
use cforge_core::landmarks::LandmarkSet;
use cforge_core::matting::{estimate_alpha, generate_trimap, MattingProvider, TrimapConfig};
use cforge_core::occlusion::{build_caricature_reading_glasses, build_caricature_sunglasses, LightingConfig, OcclusionProviders};
use cforge_core::pipeline::{build_caricature, ExaggerationConfig};
use cforge_core::{BinaryMask, Error, ImageBuffer, Result};

use crate::encoder::{iterative_project, projection_noise, Encoder, ProjectionResult};
use crate::real::Real;
use crate::stylegen::{Generator, StyleCodes};

pub const DEFAULT_PROJECT_ITERS: usize = 2;
pub const DEFAULT_WALK_STEPS: usize = 6;

pub fn project<T: Real>(
    image: &ImageBuffer<T>,
    encoder: &Encoder<T>,
    generator: &Generator<T>,
    n_iter: usize,
) -> Result<ProjectionResult<T>> {
    iterative_project(image, encoder, generator, n_iter)
}

/// Which caricature pipeline a face goes through.
#[derive(Clone, Copy, Debug)]
pub enum CaricatureRoute<'a, T> {
    Plain,
    /// Eyes are hidden: only the mouth is exaggerated.
    Sunglasses,
    ReadingGlasses {
        providers: &'a OcclusionProviders,
        lighting: &'a LightingConfig<T>,
        source: Option<&'a Path>,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct CaricatureInputs<'a, T> {
    pub landmarks: &'a LandmarkSet<T>,
    pub segmentation: &'a BinaryMask,
    pub config: &'a ExaggerationConfig<T>,
    pub matting: &'a MattingProvider,
    pub route: CaricatureRoute<'a, T>,
}

pub fn make_caricature<T: Real>(image: &ImageBuffer<T>, inputs: &CaricatureInputs<'_, T>) -> Result<ImageBuffer<T>> {
    let CaricatureInputs {
        landmarks,
        segmentation,
        config,
        matting,
        route,
    } = *inputs;
    match route {
        CaricatureRoute::Plain => build_caricature(image, landmarks, segmentation, config, matting),
        CaricatureRoute::Sunglasses => build_caricature_sunglasses(image, landmarks, segmentation, config, matting),
        CaricatureRoute::ReadingGlasses {
            providers,
            lighting,
            source,
        } => build_caricature_reading_glasses(image, landmarks, segmentation, config, providers, lighting, matting, source),
    }
}

/// Builds the caricature of `real` and projects it.
pub fn project_caricature<T: Real>(
    real: &ImageBuffer<T>,
    inputs: &CaricatureInputs<'_, T>,
    encoder: &Encoder<T>,
    generator: &Generator<T>,
    n_iter: usize,
) -> Result<ProjectionResult<T>> {
    let cari = make_caricature(real, inputs).map_err(|e| e.in_stage("caricature"))?;
    let mut result = project(&cari, encoder, generator, n_iter)?;
    result.caricature = Some(cari);
    Ok(result)
}

/// Puts the projected inner face back into the original photo.
pub fn background_blend<T: Real>(
    projected: &ImageBuffer<T>,
    original: &ImageBuffer<T>,
    segmentation: &BinaryMask,
    trimap: &TrimapConfig,
    matting: &MattingProvider,
) -> Result<ImageBuffer<T>> {
    let projected = projected.to_rgb();
    let original = original.to_rgb();
    projected.ensure_same_shape(&original)?;
    segmentation.ensure_dims(projected.dims())?;
    let tri = generate_trimap(segmentation, trimap)?;
    let alpha = estimate_alpha(&projected, &tri, matting)?;
    alpha_blend(&projected, &original, &alpha)
}

/// Interpolation positions of a walk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkSpec {
    pub t_values: Vec<f64>,
}

impl Default for WalkSpec {
    fn default() -> Self {
        Self::uniform(DEFAULT_WALK_STEPS).expect("default step count is valid")
    }
}

impl WalkSpec {
    /// `steps + 1` evenly spaced positions from 0 to 1.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("a walk needs at least 2 steps, got {steps}")));
        }
        Ok(Self {
            t_values: (0..=steps).map(|i| i as f64 / steps as f64).collect(),
        })
    }

    /// Strictly increasing positions in `[0, 1]` starting at 0 and ending at 1.
    pub fn custom(t_values: Vec<f64>) -> Result<Self> {
        validate_t_values(&t_values)?;
        if t_values.first() != Some(&0.0) || t_values.last() != Some(&1.0) {
            return Err(Error::invalid("walk positions must start at 0 and end at 1"));
        }
        Ok(Self { t_values })
    }
}

/// Non-empty, strictly increasing and inside `[0, 1]`.
pub fn validate_t_values(t: &[f64]) -> Result<()> {
    if t.is_empty() {
        return Err(Error::invalid("no walk positions"));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("walk position {bad} outside [0, 1]")));
    }
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("walk positions must be strictly increasing"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct WalkFrame<T> {
    pub t: f64,
    pub codes: StyleCodes<T>,
    pub image: ImageBuffer<T>,
}

#[derive(Clone, Debug)]
pub struct Walk<T> {
    pub real: ProjectionResult<T>,
    pub caricature: ProjectionResult<T>,
    pub frames: Vec<WalkFrame<T>>,
}

/// Frames along the straight line between two W+ codes.
pub fn walk_between<T: Real>(
    from: &StyleCodes<T>,
    to: &StyleCodes<T>,
    t_values: &[f64],
    generator: &Generator<T>,
) -> Result<Vec<WalkFrame<T>>> {
    validate_t_values(t_values)?;
    t_values
        .iter()
        .map(|&t| {
            let codes = StyleCodes::lerp(from, to, T::of(t))?;
            let image = generator.synthesize(&codes, &projection_noise())?;
            Ok(WalkFrame { t, codes, image })
        })
        .collect()
}

/// Projects the real face and its caricature and walks from one to the other.
pub fn latent_walk<T: Real>(
    real: &ImageBuffer<T>,
    inputs: &CaricatureInputs<'_, T>,
    encoder: &Encoder<T>,
    generator: &Generator<T>,
    n_iter: usize,
    walk: &WalkSpec,
) -> Result<Walk<T>> {
    let real_proj = project(real, encoder, generator, n_iter)?;
    let cari_proj = project_caricature(real, inputs, encoder, generator, n_iter)?;
    let frames = walk_between(&real_proj.codes, &cari_proj.codes, &walk.t_values, generator)?;
    Ok(Walk {
        real: real_proj,
        caricature: cari_proj,
        frames,
    })
}

/// Keeps styles below `crossover` and takes the rest from `source`.
pub fn mix_style<T: Real>(codes: &StyleCodes<T>, source: &StyleCodes<T>, crossover: usize) -> Result<StyleCodes<T>> {
    StyleCodes::mix(codes, source, crossover)
}

/// File name of the frame at `t`, in thousandths.
pub fn frame_name(t: f64) -> String {
    format!("t_{:04}.png", (t * 1000.0).round() as u32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkIndex {
    pub t_values: Vec<f64>,
    pub files: Vec<String>,
    pub code_hashes: Vec<String>,
    pub generator_hash: String,
    pub encoder_hash: String,
}

pub fn write_walk<T: Real>(frames: &[WalkFrame<T>], dir: &Path, generator_hash: &str, encoder_hash: &str) -> Result<WalkIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = WalkIndex {
        t_values: Vec::new(),
        files: Vec::new(),
        code_hashes: Vec::new(),
        generator_hash: generator_hash.into(),
        encoder_hash: encoder_hash.into(),
    };
    for f in frames {
        let name = frame_name(f.t);
        save_image(&f.image, dir.join(&name))?;
        index.t_values.push(f.t);
        index.files.push(name);
        index.code_hashes.push(f.codes.hash());
    }
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}
