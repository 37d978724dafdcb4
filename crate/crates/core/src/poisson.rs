//! Seamless cloning: guided interpolation of source gradients inside a masked
//! domain with Dirichlet boundary values taken from the target.
//!
//! For every domain pixel `i` with in-image 4-neighbours `N_i` the solver
//! enforces
//!
//! ```text
//! sum_{j in N_i} (v_i - [j in S] v_j - [j not in S] t_j) = sum_{j in N_i} (s_i - s_j)
//! ```
//!
//! which is the normal-equation form of the least-squares gradient match.
//! The system is symmetric positive definite and is solved with
//! Jacobi-preconditioned conjugate gradients.

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ImageBuffer};
use crate::scalar::Scalar;

/// Source `s`, target `t` and destination domain `S` of one cloning problem.
#[derive(Clone, Copy, Debug)]
pub struct PoissonProblem<'a, T> {
    pub source: &'a ImageBuffer<T>,
    pub target: &'a ImageBuffer<T>,
    pub domain: &'a BinaryMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig<T> {
    /// Relative residual `||r|| / ||b||` at which iteration stops.
    pub tolerance: T,
    /// Iteration cap as a multiple of the number of unknowns.
    pub iteration_factor: usize,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            tolerance: T::solver_tolerance(),
            iteration_factor: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveStats {
    /// Iterations used per channel.
    pub iterations: Vec<usize>,
    /// Max-norm residual of the linear system per channel, before clamping.
    pub residual_max: Vec<f64>,
}

/// Discretized system over the unknown pixels, shared by all channels.
struct Laplacian {
    pixels: Vec<usize>,
    /// Unknown-index neighbours (`usize::MAX` marks a boundary neighbour).
    neighbours: Vec<[usize; 4]>,
    /// Flat pixel index of each neighbour.
    neighbour_pixels: Vec<[usize; 4]>,
    degree: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl Laplacian {
    fn build(domain: &BinaryMask) -> Result<Self> {
        let (h, w) = domain.dims();
        let mut index = vec![NONE; h * w];
        let mut pixels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if domain.get(y, x) {
                    // Axes of length 1 behave as 1-D problems; along longer axes
                    // the domain must stay off the outermost ring.
                    if (h > 1 && (y == 0 || y == h - 1)) || (w > 1 && (x == 0 || x == w - 1)) {
                        return Err(Error::invalid(format!(
                            "poisson domain touches the image border at ({y}, {x})"
                        )));
                    }
                    index[y * w + x] = pixels.len();
                    pixels.push(y * w + x);
                }
            }
        }
        if pixels.is_empty() {
            return Err(Error::invalid("poisson domain is empty"));
        }
        let mut neighbours = Vec::with_capacity(pixels.len());
        let mut neighbour_pixels = Vec::with_capacity(pixels.len());
        let mut degree = Vec::with_capacity(pixels.len());
        for &p in &pixels {
            let (y, x) = (p / w, p % w);
            let mut nb = [NONE; 4];
            let mut np = [NONE; 4];
            let mut d = 0;
            let cand = [
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
            ];
            for q in cand.into_iter().flatten() {
                np[d] = q;
                nb[d] = index[q];
                d += 1;
            }
            if d == 0 {
                return Err(Error::invalid("poisson domain pixel has no neighbours"));
            }
            neighbours.push(nb);
            neighbour_pixels.push(np);
            degree.push(d);
        }
        Ok(Self {
            pixels,
            neighbours,
            neighbour_pixels,
            degree,
        })
    }

    fn apply<T: Scalar>(&self, v: &[T], out: &mut [T]) {
        for k in 0..self.pixels.len() {
            let mut acc = T::of(self.degree[k] as f64) * v[k];
            for &j in &self.neighbours[k][..self.degree[k]] {
                if j != NONE {
                    acc -= v[j];
                }
            }
            out[k] = acc;
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Solves the cloning problem and returns the composited image.
pub fn seamless_clone<T: Scalar>(problem: PoissonProblem<'_, T>) -> Result<ImageBuffer<T>> {
    seamless_clone_with(problem, &SolverConfig::default()).map(|(img, _)| img)
}

pub fn seamless_clone_with<T: Scalar>(
    problem: PoissonProblem<'_, T>,
    cfg: &SolverConfig<T>,
) -> Result<(ImageBuffer<T>, SolveStats)> {
    let PoissonProblem {
        source,
        target,
        domain,
    } = problem;
    source.ensure_same_shape(target)?;
    domain.ensure_dims(target.dims())?;
    let sys = Laplacian::build(domain)?;
    let n = sys.pixels.len();
    let ch = target.channels();
    let (s, t) = (source.data(), target.data());
    let max_iter = cfg.iteration_factor.max(1) * n;

    let mut out = target.data().to_vec();
    let mut stats = SolveStats {
        iterations: Vec::with_capacity(ch),
        residual_max: Vec::with_capacity(ch),
    };
    let (mut r, mut z, mut p, mut ap) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);

    for c in 0..ch {
        let mut b = vec![T::zero(); n];
        for k in 0..n {
            let i = sys.pixels[k];
            let mut acc = T::zero();
            for d in 0..sys.degree[k] {
                let j = sys.neighbour_pixels[k][d];
                acc += s[i * ch + c] - s[j * ch + c];
                if sys.neighbours[k][d] == NONE {
                    acc += t[j * ch + c];
                }
            }
            b[k] = acc;
        }
        // Start from the target: when the source already matches it the
        // residual is zero and the target is returned untouched.
        let mut x: Vec<T> = sys.pixels.iter().map(|&i| t[i * ch + c]).collect();
        sys.apply(&x, &mut ap);
        for k in 0..n {
            r[k] = b[k] - ap[k];
        }
        let b_norm = dot(&b, &b).sqrt();
        let threshold = cfg.tolerance * b_norm.max(T::min_positive_value());
        let inv_diag: Vec<T> = sys.degree.iter().map(|&d| T::one() / T::of(d as f64)).collect();
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        let mut iters = 0;
        while dot(&r, &r).sqrt() > threshold {
            if iters >= max_iter {
                return Err(Error::Convergence {
                    iterations: iters,
                    residual: dot(&r, &r).sqrt().as_f64(),
                });
            }
            sys.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            for k in 0..n {
                z[k] = r[k] * inv_diag[k];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
            iters += 1;
        }
        sys.apply(&x, &mut ap);
        let res = (0..n).map(|k| (b[k] - ap[k]).abs().as_f64()).fold(0.0, f64::max);
        stats.iterations.push(iters);
        stats.residual_max.push(res);
        for (k, &i) in sys.pixels.iter().enumerate() {
            out[i * ch + c] = x[k].max(T::zero()).min(T::one());
        }
    }
    let img = ImageBuffer::new(target.height(), target.width(), ch, out)?;
    Ok((img, stats))
}
