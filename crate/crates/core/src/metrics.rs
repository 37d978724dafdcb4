//! Image-pair and set-level evaluation metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adapters::{sidecar_path, CommandTemplate};
use crate::error::{Error, Result};
use crate::imaging::{luminance, save_image, ImageBuffer};
use crate::scalar::{CompensatedSum, Scalar};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const REPORT_SCHEMA: u32 = 1;

/// Mean squared error over pixels and channels.
pub fn l2_metric<T: Scalar>(x: &ImageBuffer<T>, y: &ImageBuffer<T>) -> Result<T> {
    x.ensure_same_shape(y)?;
    let mut acc = CompensatedSum::new();
    for (a, b) in x.data().iter().zip(y.data()) {
        let d = (*a - *b).as_f64();
        acc.add(d * d);
    }
    Ok(T::of(acc.value() / x.data().len() as f64))
}

fn gray<T: Scalar>(img: &ImageBuffer<T>) -> Vec<f64> {
    let (h, w) = img.dims();
    (0..h * w)
        .map(|i| luminance(img.pixel(i / w, i % w)).as_f64())
        .collect()
}

/// Normalized 2-D Gaussian window, row major.
pub fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            out.push(a / s * b / s);
        }
    }
    out
}

/// Structural similarity of the Rec.601 luma, averaged over every valid
/// 11x11 Gaussian window position.
pub fn ssim<T: Scalar>(x: &ImageBuffer<T>, y: &ImageBuffer<T>) -> Result<T> {
    x.ensure_same_shape(y)?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let (gx, gy) = (gray(x), gray(y));
    let win = ssim_window();
    let mut total = CompensatedSum::new();
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0, 0.0);
            for (k, wt) in win.iter().enumerate() {
                let p = (i + k / SSIM_WINDOW) * w + j + k % SSIM_WINDOW;
                mx += wt * gx[p];
                my += wt * gy[p];
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for (k, wt) in win.iter().enumerate() {
                let p = (i + k / SSIM_WINDOW) * w + j + k % SSIM_WINDOW;
                let (dx, dy) = (gx[p] - mx, gy[p] - my);
                vx += wt * dx * dx;
                vy += wt * dy * dy;
                cxy += wt * (dx * dy);
            }
            let num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total.add(num / den);
        }
    }
    let n = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
    Ok(T::of(total.value() / n as f64))
}

/// Image embedding backend (identity or perceptual features).
pub trait Embedder<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// `source` is the on-disk image path when there is one; file based
    /// embedders look their sidecar up next to it.
    fn embed(&self, image: &ImageBuffer<T>, source: Option<&Path>) -> Result<Vec<T>>;
}

/// Reads `<stem>.<suffix>` holding a JSON array of numbers.
#[derive(Clone, Debug)]
pub struct FileEmbedder {
    pub suffix: String,
}

impl<T: Scalar> Embedder<T> for FileEmbedder {
    fn name(&self) -> &str {
        &self.suffix
    }

    fn embed(&self, _image: &ImageBuffer<T>, source: Option<&Path>) -> Result<Vec<T>> {
        let src = source.ok_or_else(|| Error::Config("FILE embedder needs a source image path".into()))?;
        let path = sidecar_path(src, &self.suffix);
        let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
        parse_vector(&text, &path)
    }
}

/// Runs a command with `{image}` and parses a JSON array from its stdout.
#[derive(Clone, Debug)]
pub struct ExternalEmbedder {
    pub name: String,
    pub command: CommandTemplate,
}

impl<T: Scalar> Embedder<T> for ExternalEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, image: &ImageBuffer<T>, _source: Option<&Path>) -> Result<Vec<T>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let p = dir.path().join("image.png");
        save_image(image, &p)?;
        let out = self.command.run(&self.name, &[("image", &p.display().to_string())])?;
        parse_vector(&out, &PathBuf::from(format!("<{} stdout>", self.name)))
    }
}

fn parse_vector<T: Scalar>(text: &str, path: &Path) -> Result<Vec<T>> {
    let v: Vec<f64> = serde_json::from_str(text.trim()).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{} is not a finite non-empty vector", path.display())));
    }
    Ok(v.into_iter().map(T::of).collect())
}

fn tagged<R>(embedder: &str, r: Result<R>) -> Result<R> {
    r.map_err(|e| match e {
        e @ Error::Adapter { .. } => e,
        other => Error::Adapter {
            provider: embedder.to_string(),
            message: other.to_string(),
            transcript: None,
        },
    })
}

/// Cosine similarity of unit-normalized embeddings.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    let na = a.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero embedding has no direction"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x.as_f64() / na) * (y.as_f64() / nb)).sum();
    Ok(T::of(dot.clamp(-1.0, 1.0)))
}

pub fn identity_similarity<T: Scalar, E: Embedder<T> + ?Sized>(
    x: (&ImageBuffer<T>, Option<&Path>),
    y: (&ImageBuffer<T>, Option<&Path>),
    embedder: &E,
) -> Result<T> {
    let name = embedder.name().to_string();
    let a = tagged(&name, embedder.embed(x.0, x.1))?;
    let b = tagged(&name, embedder.embed(y.0, y.1))?;
    tagged(&name, cosine(&a, &b))
}

pub fn perceptual_distance<T: Scalar, E: Embedder<T> + ?Sized>(
    x: (&ImageBuffer<T>, Option<&Path>),
    y: (&ImageBuffer<T>, Option<&Path>),
    embedder: &E,
) -> Result<T> {
    let name = embedder.name().to_string();
    let a = tagged(&name, embedder.embed(x.0, x.1))?;
    let b = tagged(&name, embedder.embed(y.0, y.1))?;
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    let d: f64 = a.iter().zip(&b).map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2)).sum();
    Ok(T::of(d.sqrt()))
}

fn moments<T: Scalar>(set: &[Vec<T>], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    let mut mean = DVector::zeros(dim);
    for j in 0..dim {
        let mut acc = CompensatedSum::new();
        for v in set {
            acc.add(v[j].as_f64());
        }
        mean[j] = acc.value() / n as f64;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in a..dim {
            let mut acc = CompensatedSum::new();
            for v in set {
                acc.add((v[a].as_f64() - mean[a]) * (v[b].as_f64() - mean[b]));
            }
            let c = acc.value() / (n - 1) as f64;
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    if cov.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("embedding statistics are not finite"));
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two embedding sets (unbiased
/// covariances). The trace of (Σa Σb)^½ is taken through the symmetric form
/// (Σa^½ Σb Σa^½)^½, which has the same eigenvalues.
pub fn fid<T: Scalar>(set_a: &[Vec<T>], set_b: &[Vec<T>]) -> Result<T> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::invalid("each embedding set needs at least two samples"));
    }
    let dim = set_a[0].len();
    if dim == 0 {
        return Err(Error::invalid("empty embeddings"));
    }
    if let Some(v) = set_a.iter().chain(set_b).find(|v| v.len() != dim) {
        return Err(Error::dims(dim, v.len()));
    }
    let (ma, ca) = moments(set_a, dim)?;
    let (mb, cb) = moments(set_b, dim)?;
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (&ma - &mb).norm_squared();
    let v = diff + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if !v.is_finite() {
        return Err(Error::invalid("non-finite Frechet distance"));
    }
    Ok(T::of(v.max(0.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub name: String,
    pub l2: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub l2: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub id: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: u32,
    pub count: usize,
    pub records: Vec<PairRecord>,
    pub means: MetricMeans,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut s = 0.0;
    let mut n = 0;
    for v in values {
        s += v;
        n += 1;
    }
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

impl MetricReport {
    pub fn new(records: Vec<PairRecord>, fid: Option<f64>) -> Self {
        let count = records.len();
        let l2 = mean_of(records.iter().map(|r| r.l2)).0;
        let ssim = mean_of(records.iter().map(|r| r.ssim)).0;
        let opt = |f: fn(&PairRecord) -> Option<f64>| {
            let (m, n) = mean_of(records.iter().filter_map(f));
            (n > 0).then_some(m)
        };
        let means = MetricMeans {
            l2,
            ssim,
            lpips: opt(|r| r.lpips),
            id: opt(|r| r.id),
        };
        Self {
            schema: REPORT_SCHEMA,
            count,
            records,
            means,
            fid,
        }
    }

    /// Aligned text table with one row per pair and a closing mean row.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let width = self.records.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}", "pair", "L2↓", "SSIM↑", "LPIPS↓", "ID↑");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
                r.name,
                fmt(Some(r.l2)),
                fmt(Some(r.ssim)),
                fmt(r.lpips),
                fmt(r.id)
            );
        }
        let m = &self.means;
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
            "mean",
            fmt(Some(m.l2)),
            fmt(Some(m.ssim)),
            fmt(m.lpips),
            fmt(m.id)
        );
        if let Some(f) = self.fid {
            let _ = writeln!(s, "FID↓ {f:.4}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageBuffer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    /// Literal SSIM: raw moments per window, Gaussian written out per tap.
    fn ssim_oracle(x: &ImageBuffer<f64>, y: &ImageBuffer<f64>) -> f64 {
        let (h, w) = x.dims();
        let lum = |img: &ImageBuffer<f64>, r: usize, c: usize| {
            let p = img.pixel(r, c);
            if p.len() == 1 {
                p[0]
            } else {
                (299.0 * p[0] + 587.0 * p[1] + 114.0 * p[2]) / 1000.0
            }
        };
        let mut norm = 0.0;
        for a in -5i32..=5 {
            for b in -5i32..=5 {
                norm += (-((a * a + b * b) as f64) / 4.5).exp();
            }
        }
        let mut total = 0.0;
        let mut n = 0;
        for i in 5..h - 5 {
            for j in 5..w - 5 {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in -5i32..=5 {
                    for b in -5i32..=5 {
                        let g = (-((a * a + b * b) as f64) / 4.5).exp() / norm;
                        let r = (i as i32 + a) as usize;
                        let c = (j as i32 + b) as usize;
                        let (p, q) = (lum(x, r, c), lum(y, r, c));
                        sx += g * p;
                        sy += g * q;
                        sxx += g * p * p;
                        syy += g * q * q;
                        sxy += g * p * q;
                    }
                }
                let vx = sxx - sx * sx;
                let vy = syy - sy * sy;
                let cv = sxy - sx * sy;
                total += ((2.0 * sx * sy + 1e-4) * (2.0 * cv + 9e-4))
                    / ((sx * sx + sy * sy + 1e-4) * (vx + vy + 9e-4));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn l2_examples() {
        let z = ImageBuffer::filled(4, 5, 3, 0.0f64);
        let o = ImageBuffer::filled(4, 5, 3, 1.0f64);
        assert_eq!(l2_metric(&z, &z).unwrap(), 0.0);
        assert_eq!(l2_metric(&z, &o).unwrap(), 1.0);
        let g = ImageBuffer::filled(4, 5, 1, 0.2f64);
        let mut g2 = g.clone();
        g2.set(1, 1, 0, 0.7);
        assert!((l2_metric(&g, &g2).unwrap() - 0.25 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn ssim_examples() {
        let x = random_image(1, 20, 24, 3);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let z = ImageBuffer::filled(16, 16, 1, 0.0f64);
        let o = ImageBuffer::filled(16, 16, 1, 1.0f64);
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&z, &o).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 9.999e-5).abs() < 1e-8);
        let y = random_image(2, 20, 24, 3);
        assert!((ssim(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs() < 1e-6);
        assert!(ssim(&ImageBuffer::filled(10, 30, 1, 0.0f64), &ImageBuffer::filled(10, 30, 1, 0.0f64)).is_err());
    }

    #[test]
    fn ssim_constant_shift_follows_luminance_term() {
        let x = random_image(3, 16, 16, 1).map_clamped(|v| 0.2 + 0.5 * v);
        let shifted = x.map_clamped(|v| v + 0.1);
        assert!((ssim(&x, &shifted).unwrap() - ssim_oracle(&x, &shifted)).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ssim_symmetric_and_bounded(a in 0u64..1000, b in 0u64..1000) {
            let x = random_image(a, 12, 13, 1);
            let y = random_image(b + 1000, 12, 13, 1);
            let s = ssim(&x, &y).unwrap();
            prop_assert_eq!(s, ssim(&y, &x).unwrap());
            prop_assert!(s > -1.0 && s <= 1.0);
        }
    }

    #[test]
    fn fid_examples() {
        let a = vec![vec![-1.0f64], vec![1.0]];
        let b = vec![vec![0.0f64], vec![2.0]];
        // Means 0 and 1, unbiased variance 2 for both: trace term vanishes.
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        assert!(fid(&s, &s).unwrap().abs() < 1e-6);
        assert!(fid(&a, &[vec![0.0]]).is_err());
        assert!(fid(&[vec![f64::NAN], vec![0.0]], &a).is_err());
    }

    /// Denman-Beavers iteration for the principal root of Σa Σb.
    fn fid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let stats = |s: &[Vec<f64>]| {
            let d = s[0].len();
            let n = s.len() as f64;
            let m = DVector::from_fn(d, |j, _| s.iter().map(|v| v[j]).sum::<f64>() / n);
            let c = DMatrix::from_fn(d, d, |p, q| {
                s.iter().map(|v| (v[p] - m[p]) * (v[q] - m[q])).sum::<f64>() / (n - 1.0)
            });
            (m, c)
        };
        let (ma, ca) = stats(a);
        let (mb, cb) = stats(b);
        let prod = &ca * &cb;
        let d = prod.nrows();
        let mut y = prod.clone();
        let mut z = DMatrix::<f64>::identity(d, d);
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            y = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
        }
        (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * y.trace()
    }

    #[test]
    fn fid_matches_denman_beavers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = rand_distr::StandardNormal;
        let mut draw = |shift: f64, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..4).map(|k| shift * k as f64 + rng.sample::<f64, _>(normal)).collect())
                .collect()
        };
        let a = draw(0.0, 40);
        let b = draw(0.3, 50);
        let got = fid(&a, &b).unwrap();
        assert!((got - fid_oracle(&a, &b)).abs() < 1e-5);
        assert!((got - fid(&b, &a).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn cosine_range() {
        assert!((cosine(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0f64, 0.0], &[-3.0, 0.0]).unwrap(), -1.0);
        assert!(cosine(&[0.0f64], &[1.0]).is_err());
    }

    #[test]
    fn report_means_are_plain_averages() {
        let recs: Vec<PairRecord> = (0..5)
            .map(|i| PairRecord {
                name: format!("p{i}"),
                l2: 0.1 * i as f64,
                ssim: 1.0 - 0.07 * i as f64,
                lpips: None,
                id: (i % 2 == 0).then_some(0.3 * i as f64),
            })
            .collect();
        let r = MetricReport::new(recs.clone(), Some(2.0));
        assert_eq!(r.count, 5);
        assert_eq!(r.means.l2, recs.iter().map(|r| r.l2).sum::<f64>() / 5.0);
        assert_eq!(r.means.id, Some((0.0 + 0.6 + 1.2) / 3.0));
        assert_eq!(r.means.lpips, None);
        let back: MetricReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.table().lines().count() == 8);
    }

    #[test]
    fn file_embedder_reads_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("f.png");
        std::fs::write(sidecar_path(&src, "arcface.json"), "[3.0, 4.0]").unwrap();
        let e = FileEmbedder {
            suffix: "arcface.json".into(),
        };
        let img = ImageBuffer::filled(2, 2, 3, 0.5f64);
        assert_eq!(e.embed(&img, Some(&src)).unwrap(), vec![3.0, 4.0]);
        let err = identity_similarity((&img, Some(&src)), (&img, Some(&dir.path().join("g.png"))), &e).unwrap_err();
        assert_eq!(err.tag(), "adapter:arcface.json");
    }
}
