use cforge_core::metrics::{fid, l2_metric, ssim, MetricReport, PairRecord};
use cforge_core::ImageBuffer;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer<f64> {
    ImageBuffer::new(h, w, 3, (0..h * w * 3).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

/// Textbook SSIM on luma: Gaussian weights built here, moments recomputed per window.
fn ssim_reference(x: &ImageBuffer<f64>, y: &ImageBuffer<f64>) -> f64 {
    let luma = |img: &ImageBuffer<f64>, i: usize, j: usize| {
        0.299 * img.get(i, j, 0) + 0.587 * img.get(i, j, 1) + 0.114 * img.get(i, j, 2)
    };
    let g: Vec<f64> = (0..11).map(|k| (-((k as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = x.dims();
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let cells = || (0..11).flat_map(|a| (0..11).map(move |b| (a, b)));
            let wt = |a: usize, b: usize| g[a] * g[b] / norm;
            let mx: f64 = cells().map(|(a, b)| wt(a, b) * luma(x, i + a, j + b)).sum();
            let my: f64 = cells().map(|(a, b)| wt(a, b) * luma(y, i + a, j + b)).sum();
            let vx: f64 = cells().map(|(a, b)| wt(a, b) * (luma(x, i + a, j + b) - mx).powi(2)).sum();
            let vy: f64 = cells().map(|(a, b)| wt(a, b) * (luma(y, i + a, j + b) - my).powi(2)).sum();
            let cxy: f64 =
                cells().map(|(a, b)| wt(a, b) * (luma(x, i + a, j + b) - mx) * (luma(y, i + a, j + b) - my)).sum();
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_reference_and_closed_forms() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let (h, w) = (r.random_range(11..20), r.random_range(11..20));
        let (x, y) = (random_image(&mut r, h, w), random_image(&mut r, h, w));
        let s: f64 = ssim(&x, &y).unwrap();
        assert!((s - ssim_reference(&x, &y)).abs() <= 1e-6);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        assert!((s - ssim(&y, &x).unwrap()).abs() <= 1e-12);
        assert!(s > -1.0 && s <= 1.0);
    }
    let c1 = 0.01f64.powi(2);
    let black = ImageBuffer::filled(16, 16, 3, 0.0);
    let white = ImageBuffer::filled(16, 16, 3, 1.0);
    assert!((ssim::<f64>(&black, &white).unwrap() - c1 / (1.0 + c1)).abs() <= 1e-7);
    assert!(ssim(&ImageBuffer::filled(10, 10, 3, 0.5), &ImageBuffer::filled(10, 10, 3, 0.5)).is_err());
}

#[test]
fn l2_examples() {
    let mut a = ImageBuffer::filled(4, 5, 1, 0.25);
    assert_eq!(l2_metric(&a, &a).unwrap(), 0.0);
    let b = a.clone();
    a.set(2, 3, 0, 0.75);
    assert!((l2_metric::<f64>(&a, &b).unwrap() - 0.25 / 20.0).abs() <= 1e-15);
    assert_eq!(l2_metric(&ImageBuffer::filled(3, 3, 3, 0.0), &ImageBuffer::filled(3, 3, 3, 1.0)).unwrap(), 1.0);
}

fn gaussian_set(r: &mut ChaCha8Rng, n: usize, dim: usize, shift: f64, scale: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mix: Vec<f64> = (0..dim * dim).map(|_| normal.sample(r) * scale).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..dim).map(|_| normal.sample(r)).collect();
            (0..dim).map(|i| shift + (0..dim).map(|k| mix[i * dim + k] * z[k]).sum::<f64>()).collect()
        })
        .collect()
}

/// tr((Σa Σb)^½) as the summed square roots of the product's eigenvalues.
fn fid_reference(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let stats = |s: &[Vec<f64>]| {
        let (n, d) = (s.len(), s[0].len());
        let mean: Vec<f64> = (0..d).map(|i| s.iter().map(|v| v[i]).sum::<f64>() / n as f64).collect();
        let cov = DMatrix::from_fn(d, d, |i, j| {
            s.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / (n - 1) as f64
        });
        (mean, cov)
    };
    let ((ma, ca), (mb, cb)) = (stats(a), stats(b));
    let trace_sqrt: f64 = (&ca * &cb).complex_eigenvalues().iter().map(|l| l.re.max(0.0).sqrt()).sum();
    let diff: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    diff + ca.trace() + cb.trace() - 2.0 * trace_sqrt
}

#[test]
fn fid_matches_eigenvalue_reference() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for case in 0..10 {
        let a = gaussian_set(&mut r, 40, 4, 0.0, 1.0);
        let b = gaussian_set(&mut r, 50, 4, 0.1 * case as f64, 0.7);
        let got: f64 = fid(&a, &b).unwrap();
        assert!((got - fid_reference(&a, &b)).abs() <= 1e-5, "case {case}");
        assert!((got - fid(&b, &a).unwrap()).abs() <= 1e-6);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
    }
}

#[test]
fn fid_one_dimensional_closed_form() {
    // Unit-variance samples around 0 and 1.
    let a = vec![vec![-1.0], vec![1.0]];
    let b = vec![vec![0.0], vec![2.0]];
    let v: f64 = fid(&a, &b).unwrap();
    assert!((v - 1.0).abs() <= 1e-12, "{v}");
    assert!(fid(&a, &[vec![0.0]]).is_err());
}

#[test]
fn report_means_are_recomputed_averages() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let records: Vec<PairRecord> = (0..7)
        .map(|i| PairRecord {
            name: format!("p{i}"),
            l2: r.random_range(0.0..1.0),
            ssim: r.random_range(-1.0..1.0),
            lpips: Some(r.random_range(0.0..2.0)),
            id: None,
        })
        .collect();
    let report = MetricReport::new(records.clone(), None);
    let mean = |f: &dyn Fn(&PairRecord) -> f64| records.iter().map(f).sum::<f64>() / 7.0;
    assert_eq!(report.count, 7);
    assert_eq!(report.means.l2, mean(&|p| p.l2));
    assert_eq!(report.means.ssim, mean(&|p| p.ssim));
    assert_eq!(report.means.lpips.unwrap(), mean(&|p| p.lpips.unwrap()));
    assert_eq!(report.means.id, None);
}
