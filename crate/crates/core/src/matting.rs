//! Trimap generation and alpha estimation over the unknown band.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{sidecar_path, CommandTemplate};
use crate::error::{Error, Result};
use crate::imaging::{
    load_alpha, morphology, save_image, save_trimap, AlphaMatte, BinaryMask, ImageBuffer, Morphology,
    Trimap, TrimapLabel,
};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrimapConfig {
    pub erode_radius: usize,
    pub dilate_radius: usize,
}

impl TrimapConfig {
    pub fn new(erode_radius: usize, dilate_radius: usize) -> Result<Self> {
        let cfg = Self {
            erode_radius,
            dilate_radius,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.erode_radius < 1 || self.dilate_radius < 1 {
            return Err(Error::invalid("trimap radii must be at least 1"));
        }
        Ok(())
    }

    /// Radii of 5 px at 256 px, scaled linearly with resolution (minimum 1).
    pub fn for_resolution(size: usize) -> Self {
        let r = ((5.0 * size as f64 / 256.0).round() as usize).max(1);
        Self {
            erode_radius: r,
            dilate_radius: r,
        }
    }
}

impl Default for TrimapConfig {
    fn default() -> Self {
        Self::for_resolution(256)
    }
}

/// FG = eroded mask, BG = outside the dilated mask, UNKNOWN = the band in between.
pub fn generate_trimap(face_mask: &BinaryMask, cfg: &TrimapConfig) -> Result<Trimap> {
    cfg.validate()?;
    if face_mask.is_empty() {
        return Err(Error::invalid("trimap source mask is empty"));
    }
    if face_mask.is_full() {
        return Err(Error::invalid("trimap source mask covers the whole image"));
    }
    let fg = morphology(face_mask, Morphology::Erode, cfg.erode_radius);
    let grown = morphology(face_mask, Morphology::Dilate, cfg.dilate_radius);
    if fg.is_empty() {
        return Err(Error::DegenerateTrimap(format!(
            "erosion by {} empties the foreground",
            cfg.erode_radius
        )));
    }
    let labels = fg
        .data()
        .iter()
        .zip(grown.data())
        .map(|(&f, &g)| match (f, g) {
            (true, _) => TrimapLabel::Foreground,
            (false, false) => TrimapLabel::Background,
            (false, true) => TrimapLabel::Unknown,
        })
        .collect();
    Trimap::new(face_mask.height(), face_mask.width(), labels)
}

/// Lower envelope of parabolas, one dimension (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// (`+inf` everywhere when the mask is empty).
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let mut grid: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0f64; h];
    let mut col_out = vec![0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Per-image matting backend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MattingProvider {
    /// Distance-ratio feather across the unknown band.
    Baseline,
    /// Precomputed grayscale matte.
    File(PathBuf),
    /// Command receiving `{image}` and `{trimap}` paths, printing the matte path.
    External(CommandTemplate),
}

/// Matting backend as configured for a whole batch; resolved per image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MattingSource {
    #[default]
    Baseline,
    /// `<stem>.alpha.png` next to the source image.
    File,
    External(CommandTemplate),
}

impl MattingSource {
    pub fn resolve(&self, source_image: Option<&Path>) -> Result<MattingProvider> {
        Ok(match self {
            MattingSource::Baseline => MattingProvider::Baseline,
            MattingSource::External(t) => MattingProvider::External(t.clone()),
            MattingSource::File => match source_image {
                Some(p) => MattingProvider::File(sidecar_path(p, "alpha.png")),
                None => return Err(Error::Config("FILE matting needs a source image path".into())),
            },
        })
    }
}

fn baseline_alpha<T: Scalar>(trimap: &Trimap) -> Result<AlphaMatte<T>> {
    let fg = trimap.mask_of(TrimapLabel::Foreground);
    let bg = trimap.mask_of(TrimapLabel::Background);
    if fg.is_empty() {
        return Err(Error::DegenerateTrimap("trimap has no foreground".into()));
    }
    let dfg = squared_distance_transform(&fg);
    // With no sure background every unknown pixel is infinitely far from it: alpha = 1.
    let dbg = squared_distance_transform(&bg);
    let data = trimap
        .data()
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            TrimapLabel::Foreground => T::one(),
            TrimapLabel::Background => T::zero(),
            TrimapLabel::Unknown => {
                let (a, b) = (dfg[i].sqrt(), dbg[i].sqrt());
                if b.is_infinite() {
                    T::one()
                } else {
                    T::of(b / (a + b))
                }
            }
        })
        .collect();
    AlphaMatte::new(trimap.height(), trimap.width(), data)
}

/// Forces the sure regions of a provider's matte to 1 (FG) and 0 (BG).
fn enforce_trimap<T: Scalar>(alpha: AlphaMatte<T>, trimap: &Trimap) -> Result<AlphaMatte<T>> {
    if alpha.dims() != trimap.dims() {
        return Err(Error::dims(trimap.dims(), alpha.dims()));
    }
    let data = alpha
        .data()
        .iter()
        .zip(trimap.data())
        .map(|(&a, l)| match l {
            TrimapLabel::Foreground => T::one(),
            TrimapLabel::Background => T::zero(),
            TrimapLabel::Unknown => a,
        })
        .collect();
    AlphaMatte::new(alpha.height(), alpha.width(), data)
}

pub fn estimate_alpha<T: Scalar>(
    image: &ImageBuffer<T>,
    trimap: &Trimap,
    provider: &MattingProvider,
) -> Result<AlphaMatte<T>> {
    if image.dims() != trimap.dims() {
        return Err(Error::dims(image.dims(), trimap.dims()));
    }
    match provider {
        MattingProvider::Baseline => baseline_alpha(trimap),
        MattingProvider::File(path) => {
            if !path.exists() {
                return Err(Error::MissingArtifact(path.clone()));
            }
            enforce_trimap(load_alpha(path)?, trimap)
        }
        MattingProvider::External(cmd) => {
            let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            let img_path = dir.path().join("image.png");
            let tri_path = dir.path().join("trimap.png");
            save_image(image, &img_path)?;
            save_trimap(trimap, &tri_path)?;
            let out = cmd.run(
                "matting",
                &[
                    ("image", &img_path.display().to_string()),
                    ("trimap", &tri_path.display().to_string()),
                ],
            )?;
            let matte = load_alpha(out.lines().last().unwrap_or_default().trim()).map_err(|e| Error::Adapter {
                provider: "matting".into(),
                message: format!("could not read matte {out:?}: {e}"),
                transcript: None,
            })?;
            enforce_trimap(matte, trimap)
        }
    }
}
