//! Caricatures for faces wearing glasses.
//!
//! Reading glasses go through five stages: glass/shadow removal, restoration,
//! caricature generation, putting the glasses back and lighting correction.
//! Sunglasses faces only get their mouth exaggerated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{sidecar_path, CommandTemplate};
use crate::error::{Error, Result};
use crate::imaging::{
    alpha_blend, box_blur_mask, load_image, load_mask, luminance_mask, masked_extract, save_image, AlphaMatte,
    BinaryMask, ImageBuffer,
};
use crate::landmarks::LandmarkSet;
use crate::matting::MattingProvider;
use crate::pipeline::{build_caricature, build_caricature_traced, CaricatureTrace, ExaggerationConfig};
use crate::poisson::{seamless_clone, PoissonProblem};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdapterSource {
    #[default]
    Stub,
    File,
    External(CommandTemplate),
}

/// Backends for the removal stages. FILE adapters read `<stem>.glassmask.png`,
/// `<stem>.shadowmask.png`, `<stem>.noglasses.png` and `<stem>.restored.png`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionProviders {
    #[serde(default)]
    pub glass_mask: AdapterSource,
    #[serde(default)]
    pub shadow_mask: AdapterSource,
    #[serde(default)]
    pub remover: AdapterSource,
    #[serde(default)]
    pub restorer: AdapterSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LightingConfig<T> {
    pub threshold: T,
    pub feather_radius: usize,
}

impl<T: Scalar> LightingConfig<T> {
    pub fn new(threshold: T, feather_radius: usize) -> Result<Self> {
        if !(threshold >= T::zero() && threshold <= T::one()) {
            return Err(Error::invalid(format!("lighting threshold {threshold} outside [0, 1]")));
        }
        Ok(Self {
            threshold,
            feather_radius,
        })
    }
}

impl<T: Scalar> Default for LightingConfig<T> {
    fn default() -> Self {
        Self {
            threshold: T::of(0.92),
            feather_radius: 2,
        }
    }
}

fn need_source<'a>(source: Option<&'a Path>, what: &str) -> Result<&'a Path> {
    source.ok_or_else(|| Error::Config(format!("FILE {what} adapter needs a source image path")))
}

fn run_to_image<T: Scalar>(cmd: &CommandTemplate, provider: &str, args: &[(&str, &Path)]) -> Result<PathBuf> {
    let owned: Vec<(&str, String)> = args.iter().map(|(k, p)| (*k, p.display().to_string())).collect();
    let refs: Vec<(&str, &str)> = owned.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let out = cmd.run(provider, &refs)?;
    Ok(PathBuf::from(out.lines().last().unwrap_or_default().trim()))
}

fn with_temp_image<T: Scalar, R>(image: &ImageBuffer<T>, f: impl FnOnce(&Path) -> Result<R>) -> Result<R> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("input.png");
    save_image(image, &path)?;
    f(&path)
}

fn provide_mask<T: Scalar>(
    adapter: &AdapterSource,
    kind: &'static str,
    image: &ImageBuffer<T>,
    source: Option<&Path>,
) -> Result<BinaryMask> {
    let mask = match adapter {
        AdapterSource::Stub => BinaryMask::empty(image.height(), image.width()),
        AdapterSource::File => load_mask(sidecar_path(need_source(source, kind)?, &format!("{}.png", kind.replace('_', ""))))?,
        AdapterSource::External(cmd) => with_temp_image(image, |p| load_mask(run_to_image::<T>(cmd, kind, &[("image", p)])?))?,
    };
    if mask.dims() != image.dims() {
        return Err(Error::invalid(format!(
            "{kind} is {}x{}, image is {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    Ok(mask)
}

/// Zero-gradient Poisson fill over `region` (border pixels excluded): the
/// region is replaced by the harmonic interpolation of its surroundings.
pub fn poisson_fill<T: Scalar>(image: &ImageBuffer<T>, region: &BinaryMask) -> Result<ImageBuffer<T>> {
    let (h, w) = image.dims();
    let interior = BinaryMask::from_fn(h, w, |y, x| {
        region.get(y, x) && (h == 1 || (y > 0 && y + 1 < h)) && (w == 1 || (x > 0 && x + 1 < w))
    });
    if interior.is_empty() {
        return Ok(image.clone());
    }
    let flat = ImageBuffer::filled(h, w, image.channels(), T::of(0.5));
    seamless_clone(PoissonProblem {
        source: &flat,
        target: image,
        domain: &interior,
    })
}

/// Returns the glasses-free image with the glass and shadow masks.
pub fn remove_glasses<T: Scalar>(
    image: &ImageBuffer<T>,
    providers: &OcclusionProviders,
    source: Option<&Path>,
) -> Result<(ImageBuffer<T>, BinaryMask, BinaryMask)> {
    let glass = provide_mask(&providers.glass_mask, "glass_mask", image, source).map_err(|e| e.in_stage("glass_mask"))?;
    let shadow =
        provide_mask(&providers.shadow_mask, "shadow_mask", image, source).map_err(|e| e.in_stage("shadow_mask"))?;
    let region = glass.union(&shadow)?;
    let removed = match &providers.remover {
        AdapterSource::Stub => poisson_fill(image, &region),
        AdapterSource::File => need_source(source, "remover").and_then(|s| load_image(sidecar_path(s, "noglasses.png"))),
        AdapterSource::External(cmd) => with_temp_image(image, |p| {
            let dir = p.parent().expect("temp dir");
            let mpath = dir.join("mask.png");
            crate::imaging::save_mask(&region, &mpath)?;
            load_image(run_to_image::<T>(cmd, "remover", &[("image", p), ("mask", &mpath)])?)
        }),
    }
    .and_then(|r| {
        r.ensure_same_shape(image)?;
        Ok(r)
    })
    .map_err(|e| e.in_stage("remover"))?;
    Ok((removed, glass, shadow))
}

pub fn restore_face<T: Scalar>(
    image: &ImageBuffer<T>,
    providers: &OcclusionProviders,
    source: Option<&Path>,
) -> Result<ImageBuffer<T>> {
    let restored = match &providers.restorer {
        AdapterSource::Stub => Ok(image.clone()),
        AdapterSource::File => need_source(source, "restorer").and_then(|s| load_image(sidecar_path(s, "restored.png"))),
        AdapterSource::External(cmd) => {
            with_temp_image(image, |p| load_image(run_to_image::<T>(cmd, "restorer", &[("image", p)])?))
        }
    }
    .and_then(|r| {
        r.ensure_same_shape(image)?;
        Ok(r)
    });
    restored.map_err(|e| e.in_stage("restorer"))
}

/// Puts the original glasses back over the caricature.
pub fn replace_glasses<T: Scalar>(
    caricature: &ImageBuffer<T>,
    original: &ImageBuffer<T>,
    glass_mask: &BinaryMask,
) -> Result<ImageBuffer<T>> {
    caricature.ensure_same_shape(original)?;
    let glasses = masked_extract(original, glass_mask)?;
    alpha_blend(&glasses, caricature, &glass_mask.to_alpha())
}

/// Light matte: luminance-thresholded original, box-feathered.
pub fn light_matte<T: Scalar>(original: &ImageBuffer<T>, cfg: &LightingConfig<T>) -> Result<AlphaMatte<T>> {
    let mask = luminance_mask(original, cfg.threshold)?;
    Ok(box_blur_mask(&mask, cfg.feather_radius))
}

/// Restores the original's highlights over the processed image.
pub fn correct_lighting<T: Scalar>(
    image: &ImageBuffer<T>,
    original: &ImageBuffer<T>,
    cfg: &LightingConfig<T>,
) -> Result<ImageBuffer<T>> {
    image.ensure_same_shape(original)?;
    alpha_blend(original, image, &light_matte(original, cfg)?)
}

#[derive(Clone, Debug)]
pub struct GlassesTrace<T> {
    pub removed: ImageBuffer<T>,
    pub glass_mask: BinaryMask,
    pub shadow_mask: BinaryMask,
    pub restored: ImageBuffer<T>,
    pub caricature: CaricatureTrace<T>,
    pub with_glasses: ImageBuffer<T>,
    pub output: ImageBuffer<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn build_caricature_reading_glasses<T: Scalar>(
    image: &ImageBuffer<T>,
    landmarks: &LandmarkSet<T>,
    segmentation: &BinaryMask,
    cfg: &ExaggerationConfig<T>,
    providers: &OcclusionProviders,
    lighting: &LightingConfig<T>,
    matting: &MattingProvider,
    source: Option<&Path>,
) -> Result<ImageBuffer<T>> {
    build_reading_glasses_traced(image, landmarks, segmentation, cfg, providers, lighting, matting, source)
        .map(|t| t.output)
}

#[allow(clippy::too_many_arguments)]
pub fn build_reading_glasses_traced<T: Scalar>(
    image: &ImageBuffer<T>,
    landmarks: &LandmarkSet<T>,
    segmentation: &BinaryMask,
    cfg: &ExaggerationConfig<T>,
    providers: &OcclusionProviders,
    lighting: &LightingConfig<T>,
    matting: &MattingProvider,
    source: Option<&Path>,
) -> Result<GlassesTrace<T>> {
    let (removed, glass_mask, shadow_mask) = remove_glasses(image, providers, source).map_err(|e| e.in_stage("removal"))?;
    let restored = restore_face(&removed, providers, source).map_err(|e| e.in_stage("correction"))?;
    let caricature = build_caricature_traced(&restored, landmarks, segmentation, cfg, matting)
        .map_err(|e| e.in_stage("caricature"))?;
    let with_glasses =
        replace_glasses(caricature.output(), image, &glass_mask).map_err(|e| e.in_stage("glasses"))?;
    let output = correct_lighting(&with_glasses, image, lighting).map_err(|e| e.in_stage("lighting"))?;
    Ok(GlassesTrace {
        removed,
        glass_mask,
        shadow_mask,
        restored,
        caricature,
        with_glasses,
        output,
    })
}

/// Sunglasses cannot be seen through: only the mouth is exaggerated.
pub fn build_caricature_sunglasses<T: Scalar>(
    image: &ImageBuffer<T>,
    landmarks: &LandmarkSet<T>,
    segmentation: &BinaryMask,
    cfg: &ExaggerationConfig<T>,
    matting: &MattingProvider,
) -> Result<ImageBuffer<T>> {
    build_caricature(image, landmarks, segmentation, &cfg.mouth_only(), matting)
}
