//! Frozen random embedders that stand in for pretrained perceptual and
//! identity networks. Both are differentiable graph functions so the full
//! encoder objective can be trained and gradient-checked without external
//! weights.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cforge_core::metrics::Embedder;
use cforge_core::{Error, ImageBuffer, Result};

use crate::graph::{ConvSpec, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Two frozen random 4x4 stride-2 linear convolutions; the embedding is both
/// feature maps flattened and concatenated.
#[derive(Clone, Debug)]
pub struct StubFeatureExtractor<T> {
    w1: Tensor<T>,
    w2: Tensor<T>,
}

impl<T: Real> StubFeatureExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2) = (8, 16);
        Self {
            w1: Tensor::randn(&[c1, 3, 4, 4], 1.0 / 48f64.sqrt(), &mut rng),
            w2: Tensor::randn(&[c2, c1, 4, 4], 1.0 / ((c1 * 16) as f64).sqrt(), &mut rng),
        }
    }

    /// N x 3 x H x W images to N x D features.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Var {
        let spec = ConvSpec { stride: 2, pad: 1 };
        let w1 = g.constant(self.w1.clone());
        let w2 = g.constant(self.w2.clone());
        let f1 = g.conv2d(x, w1, spec);
        let f2 = g.conv2d(f1, w2, spec);
        let n = g.value(x).shape[0];
        let a = flatten(g, f1, n);
        let b = flatten(g, f2, n);
        g.concat_cols(&[a, b])
    }

    /// Per-sample ‖F(x) − F(y)‖.
    pub fn distance(&self, g: &mut Graph<T>, x: Var, y: Var) -> Var {
        let fx = self.features(g, x);
        let fy = self.features(g, y);
        let d = g.sub(fx, fy);
        g.row_norm(d)
    }
}

/// Average pool to 4x4, frozen random projection, unit-normalized rows.
#[derive(Clone, Debug)]
pub struct StubIdentityEmbedder<T> {
    proj: Tensor<T>,
    pub dim: usize,
}

impl<T: Real> StubIdentityEmbedder<T> {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            proj: Tensor::randn(&[dim, 48], 1.0 / 48f64.sqrt(), &mut rng),
            dim,
        }
    }

    pub fn embed_graph(&self, g: &mut Graph<T>, x: Var) -> Var {
        let shape = g.value(x).shape.clone();
        assert!(shape[2] >= 4 && shape[2] % 4 == 0 && shape[2] == shape[3], "identity embedder needs square images divisible by 4");
        let pooled = g.pool(x, shape[2] / 4);
        let flat = flatten(g, pooled, shape[0]);
        let p = g.constant(self.proj.clone());
        let e = g.matmul_nt(flat, p);
        g.normalize_rows(e)
    }

    /// Per-sample 1 − ⟨A(x), A(y)⟩.
    pub fn id_loss(&self, g: &mut Graph<T>, x: Var, y: Var) -> Var {
        let ax = self.embed_graph(g, x);
        let ay = self.embed_graph(g, y);
        let dot = g.row_dot(ax, ay);
        let n = g.value(dot).len();
        let one = g.constant(Tensor::full(&[n], T::one()));
        g.sub(one, dot)
    }
}

fn flatten<T: Real>(g: &mut Graph<T>, x: Var, n: usize) -> Var {
    let len = g.value(x).len();
    g.reshape(x, &[n, len / n])
}

fn single<T: Real>(image: &ImageBuffer<T>, f: impl FnOnce(&mut Graph<T>, Var) -> Var) -> Result<Vec<T>> {
    let rgb = image.to_rgb();
    let t = Tensor::from_images(&[&rgb])?;
    let mut g = Graph::new();
    let x = g.constant(t);
    let y = f(&mut g, x);
    Ok(g.value(y).data.clone())
}

impl<T: Real> Embedder<T> for StubFeatureExtractor<T> {
    fn name(&self) -> &str {
        "stub-perceptual"
    }

    fn embed(&self, image: &ImageBuffer<T>, _source: Option<&Path>) -> Result<Vec<T>> {
        if image.height() < 4 || image.width() < 4 {
            return Err(Error::invalid("perceptual stub needs images of at least 4x4"));
        }
        single(image, |g, x| self.features(g, x))
    }
}

impl<T: Real> Embedder<T> for StubIdentityEmbedder<T> {
    fn name(&self) -> &str {
        "stub-identity"
    }

    fn embed(&self, image: &ImageBuffer<T>, _source: Option<&Path>) -> Result<Vec<T>> {
        let (h, w) = image.dims();
        if h != w || h < 4 || h % 4 != 0 {
            return Err(Error::invalid(format!("identity stub needs a square image divisible by 4, got {h}x{w}")));
        }
        single(image, |g, x| self.embed_graph(g, x))
    }
}
