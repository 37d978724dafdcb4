//! Landmark enlargement, patch rescaling with seamless blending, and matting
//! based contour deblur, composed into the caricature builder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::sidecar_path;
use crate::error::{Error, Result};
use crate::imaging::{alpha_blend, load_mask, sample_bilinear, AlphaMatte, BinaryMask, ImageBuffer, Trimap};
use crate::landmarks::{enlarge_region, region_mask, LandmarkSet, Point2, RegionName, RegionSpec};
use crate::matting::{estimate_alpha, generate_trimap, MattingProvider, TrimapConfig};
use crate::poisson::{seamless_clone, PoissonProblem};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExaggerationConfig<T> {
    /// Regions processed in order; earlier regions claim overlapping pixels.
    pub regions: Vec<RegionSpec<T>>,
    pub patch_scale: T,
    pub landmark_factor: T,
    pub trimap: TrimapConfig,
}

impl<T: Scalar> ExaggerationConfig<T> {
    /// Eyes then mouth, patch scale 1.5, landmark factor 1.3, trimap radii scaled to `size`.
    pub fn for_resolution(size: usize) -> Self {
        Self {
            regions: [RegionName::RightEye, RegionName::LeftEye, RegionName::Mouth]
                .into_iter()
                .map(RegionSpec::standard)
                .collect(),
            patch_scale: T::of(1.5),
            landmark_factor: T::of(1.3),
            trimap: TrimapConfig::for_resolution(size),
        }
    }

    /// Leaves the image geometrically untouched.
    pub fn identity(size: usize) -> Self {
        Self {
            patch_scale: T::one(),
            landmark_factor: T::one(),
            ..Self::for_resolution(size)
        }
    }

    /// Same settings restricted to mouth regions (sunglasses faces).
    pub fn mouth_only(&self) -> Self {
        Self {
            regions: self.regions.iter().filter(|r| r.name.is_mouth()).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::Config("exaggeration needs at least one region".into()));
        }
        if !(self.patch_scale > T::zero()) || !(self.landmark_factor > T::zero()) {
            return Err(Error::Config("patch scale and landmark factor must be positive".into()));
        }
        for r in &self.regions {
            r.validate()?;
        }
        self.trimap.validate()
    }
}

impl<T: Scalar> Default for ExaggerationConfig<T> {
    fn default() -> Self {
        Self::for_resolution(256)
    }
}

/// Output of the patch stage with the blending domain of every region.
#[derive(Clone, Debug)]
pub struct PatchTrace<T> {
    pub image: ImageBuffer<T>,
    pub region_masks: Vec<(RegionName, BinaryMask)>,
}

fn check_interior<T: Scalar>(points: &[Point2<T>], name: RegionName, h: usize, w: usize) -> Result<()> {
    let (xmax, ymax) = (T::of(w as f64 - 2.0), T::of(h as f64 - 2.0));
    let one = T::one();
    if points.iter().any(|p| p.x < one || p.y < one || p.x > xmax || p.y > ymax) {
        return Err(Error::RegionOutOfBounds {
            region: name.as_str().to_string(),
        });
    }
    Ok(())
}

/// Bounding box of the set pixels as `(y0, y1, x0, x1)`, inclusive.
fn bbox(mask: &BinaryMask) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                b = Some(match b {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
    }
    b
}

/// Source image for one region: the patch scaled by `scale` about the centre
/// of its bounding box, resampled bilinearly from the current image.
fn scaled_patch_source<T: Scalar>(image: &ImageBuffer<T>, mask: &BinaryMask, scale: T) -> Result<ImageBuffer<T>> {
    let Some((y0, y1, x0, x1)) = bbox(mask) else {
        return Ok(image.clone());
    };
    let cy = T::of((y0 + y1) as f64 / 2.0);
    let cx = T::of((x0 + x1) as f64 / 2.0);
    ImageBuffer::from_fn(image.height(), image.width(), image.channels(), |y, x, c| {
        let sy = cy + (T::of(y as f64) - cy) / scale;
        let sx = cx + (T::of(x as f64) - cx) / scale;
        sample_bilinear(image, sy, sx, c).max(T::zero()).min(T::one())
    })
}

pub fn exaggerate_patches<T: Scalar>(
    image: &ImageBuffer<T>,
    lm: &LandmarkSet<T>,
    cfg: &ExaggerationConfig<T>,
) -> Result<ImageBuffer<T>> {
    exaggerate_patches_traced(image, lm, cfg).map(|t| t.image)
}

pub fn exaggerate_patches_traced<T: Scalar>(
    image: &ImageBuffer<T>,
    lm: &LandmarkSet<T>,
    cfg: &ExaggerationConfig<T>,
) -> Result<PatchTrace<T>> {
    cfg.validate()?;
    let (h, w) = image.dims();
    let mut current = image.clone();
    let mut claimed = BinaryMask::empty(h, w);
    let mut region_masks = Vec::with_capacity(cfg.regions.len());
    for region in &cfg.regions {
        let enlarged = enlarge_region(lm, region, cfg.landmark_factor)?;
        check_interior(&enlarged, region.name, h, w)?;
        let domain = region_mask(&enlarged, h, w)?.difference(&claimed)?;
        if !domain.is_empty() {
            let source = scaled_patch_source(&current, &domain, cfg.patch_scale)?;
            current = seamless_clone(PoissonProblem {
                source: &source,
                target: &current,
                domain: &domain,
            })?;
            claimed = claimed.union(&domain)?;
        }
        region_masks.push((region.name, domain));
    }
    Ok(PatchTrace {
        image: current,
        region_masks,
    })
}

#[derive(Clone, Debug)]
pub struct DeblurTrace<T> {
    pub image: ImageBuffer<T>,
    pub trimap: Trimap,
    pub alpha: AlphaMatte<T>,
}

/// Alpha-blends the exaggerated image over the original using a matte
/// estimated from the face segmentation's trimap.
pub fn deblur_contour<T: Scalar>(
    blended: &ImageBuffer<T>,
    original: &ImageBuffer<T>,
    segmentation: &BinaryMask,
    cfg: &TrimapConfig,
    matting: &MattingProvider,
) -> Result<ImageBuffer<T>> {
    deblur_contour_traced(blended, original, segmentation, cfg, matting).map(|t| t.image)
}

pub fn deblur_contour_traced<T: Scalar>(
    blended: &ImageBuffer<T>,
    original: &ImageBuffer<T>,
    segmentation: &BinaryMask,
    cfg: &TrimapConfig,
    matting: &MattingProvider,
) -> Result<DeblurTrace<T>> {
    blended.ensure_same_shape(original)?;
    segmentation.ensure_dims(original.dims())?;
    let trimap = generate_trimap(segmentation, cfg)?;
    let alpha = estimate_alpha(blended, &trimap, matting)?;
    let image = alpha_blend(blended, original, &alpha)?;
    Ok(DeblurTrace { image, trimap, alpha })
}

#[derive(Clone, Debug)]
pub struct CaricatureTrace<T> {
    pub patches: PatchTrace<T>,
    pub deblur: DeblurTrace<T>,
}

impl<T> CaricatureTrace<T> {
    pub fn output(&self) -> &ImageBuffer<T> {
        &self.deblur.image
    }
}

pub fn build_caricature<T: Scalar>(
    image: &ImageBuffer<T>,
    landmarks: &LandmarkSet<T>,
    segmentation: &BinaryMask,
    cfg: &ExaggerationConfig<T>,
    matting: &MattingProvider,
) -> Result<ImageBuffer<T>> {
    build_caricature_traced(image, landmarks, segmentation, cfg, matting).map(|t| t.deblur.image)
}

pub fn build_caricature_traced<T: Scalar>(
    image: &ImageBuffer<T>,
    landmarks: &LandmarkSet<T>,
    segmentation: &BinaryMask,
    cfg: &ExaggerationConfig<T>,
    matting: &MattingProvider,
) -> Result<CaricatureTrace<T>> {
    let patches = exaggerate_patches_traced(image, landmarks, cfg).map_err(|e| e.in_stage("exaggerate"))?;
    let deblur = deblur_contour_traced(&patches.image, image, segmentation, &cfg.trimap, matting)
        .map_err(|e| e.in_stage("deblur"))?;
    Ok(CaricatureTrace { patches, deblur })
}

/// Face region from the jaw line and brows (landmarks 0-26); excludes hair.
pub fn landmark_face_mask<T: Scalar>(lm: &LandmarkSet<T>, height: usize, width: usize) -> Result<BinaryMask> {
    let idx: Vec<usize> = (0..27).collect();
    region_mask(&lm.select(&idx), height, width)
}

/// Where face segmentations come from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SegmentationSource {
    /// Convex hull of the jaw and brow landmarks.
    #[default]
    Stub,
    /// `<stem>.facemask.png` next to the source image.
    File,
}

impl SegmentationSource {
    pub fn load<T: Scalar>(&self, source: &Path, lm: &LandmarkSet<T>, height: usize, width: usize) -> Result<BinaryMask> {
        let mask = match self {
            SegmentationSource::Stub => landmark_face_mask(lm, height, width)?,
            SegmentationSource::File => load_mask(sidecar_path(source, "facemask.png"))?,
        };
        mask.ensure_dims((height, width))?;
        Ok(mask)
    }
}
