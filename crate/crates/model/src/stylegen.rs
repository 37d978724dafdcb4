//! Style-based generator (mapping network, AdaIN synthesis with noise
//! inputs), a small convolutional discriminator, the non-saturating losses
//! with R1, and the adversarial training loop.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cforge_core::{CompensatedSum, Error, ImageBuffer, Result};

use crate::graph::{Graph, Var};
use crate::nn::{Adam, Conv, Init, Linear, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const ADAIN_EPS: f64 = 1e-8;
const ACT_SLOPE: f64 = 0.2;
const MBSTD_GROUP: usize = 4;
/// Weight gain of layers feeding a leaky rectifier, keeping activations near unit variance.
const ACT_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub d_latent: usize,
    pub mapping_layers: usize,
    /// Feature maps at resolution r: `channel_base / r`, clamped to `[1, channel_cap]`.
    pub channel_base: usize,
    pub channel_cap: usize,
    pub mapping_lr_mul: f64,
    pub mapping_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            d_latent: 128,
            mapping_layers: 8,
            channel_base: 8192,
            channel_cap: 128,
            mapping_lr_mul: 0.01,
            mapping_slope: ACT_SLOPE,
        }
    }
}

impl GeneratorConfig {
    /// 16x16, 32-d latents, 16 feature maps everywhere.
    pub fn toy() -> Self {
        Self {
            resolution: 16,
            d_latent: 32,
            channel_base: 256,
            channel_cap: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("resolution {} is not a power of two >= 8", self.resolution)));
        }
        if self.d_latent == 0 || self.mapping_layers == 0 || self.channel_cap == 0 {
            return Err(Error::Config("latent size, mapping depth and channel cap must be positive".into()));
        }
        if !(self.mapping_lr_mul > 0.0) {
            return Err(Error::Config("mapping learning-rate multiplier must be positive".into()));
        }
        Ok(())
    }

    pub fn n_styles(&self) -> usize {
        2 * self.resolution.trailing_zeros() as usize - 2
    }

    pub fn channels_at(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_cap)
    }

    /// Synthesis resolutions from 4 up to the output size.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut r = vec![4];
        while *r.last().unwrap() < self.resolution {
            r.push(r.last().unwrap() * 2);
        }
        r
    }

    /// Resolution of every style-modulated layer.
    pub fn layer_resolutions(&self) -> Vec<usize> {
        self.resolutions().into_iter().flat_map(|r| [r, r]).collect()
    }
}

/// A W+ code: one style vector per synthesis layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct StyleCodes<T> {
    pub n_styles: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> StyleCodes<T> {
    pub fn new(n_styles: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n_styles * dim {
            return Err(Error::dims(n_styles * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("style codes must be finite"));
        }
        Ok(Self { n_styles, dim, data })
    }

    /// The same W vector for every layer.
    pub fn broadcast(w: &[T], n_styles: usize) -> Self {
        Self {
            n_styles,
            dim: w.len(),
            data: (0..n_styles).flat_map(|_| w.iter().copied()).collect(),
        }
    }

    pub fn style(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.n_styles, self.dim) != (other.n_styles, other.dim) {
            return Err(Error::dims((self.n_styles, self.dim), (other.n_styles, other.dim)));
        }
        Ok(())
    }

    /// `(1 - t) * a + t * b` for every style vector. The endpoints return
    /// exact copies of `a` and `b`.
    pub fn lerp(a: &Self, b: &Self, t: T) -> Result<Self> {
        a.same_shape(b)?;
        if t == T::zero() {
            return Ok(a.clone());
        }
        if t == T::one() {
            return Ok(b.clone());
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(p, q)| (T::one() - t) * *p + t * *q)
            .collect();
        Ok(Self { data, ..a.clone() })
    }

    /// Styles below `crossover` from `a`, the rest from `b`.
    pub fn mix(a: &Self, b: &Self, crossover: usize) -> Result<Self> {
        a.same_shape(b)?;
        if crossover > a.n_styles {
            return Err(Error::invalid(format!("crossover {crossover} outside [0, {}]", a.n_styles)));
        }
        let cut = crossover * a.dim;
        let data = a.data[..cut].iter().chain(&b.data[cut..]).copied().collect();
        Ok(Self { data, ..a.clone() })
    }

    pub fn add(&self, delta: &Self) -> Result<Self> {
        self.same_shape(delta)?;
        let data = self.data.iter().zip(&delta.data).map(|(p, q)| *p + *q).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![1, self.n_styles, self.dim], self.data.clone())
    }

    /// Splits an N x S x D tensor into per-sample codes.
    pub fn from_batch(t: &Tensor<T>) -> Vec<Self> {
        let [n, s, d] = t.shape[..] else {
            panic!("expected N x S x D codes")
        };
        (0..n)
            .map(|i| Self {
                n_styles: s,
                dim: d,
                data: t.data[i * s * d..(i + 1) * s * d].to_vec(),
            })
            .collect()
    }

    pub fn stack(codes: &[&Self]) -> Tensor<T> {
        let (s, d) = (codes[0].n_styles, codes[0].dim);
        let data = codes.iter().flat_map(|c| c.data.iter().copied()).collect();
        Tensor::new(vec![codes.len(), s, d], data)
    }

    pub fn hash(&self) -> String {
        vector_hash(&self.data)
    }
}

/// sha256 of the values widened to little-endian f64.
pub fn vector_hash<T: Real>(v: &[T]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for x in v {
        h.update(x.as_f64().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Per-layer noise inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Noise<T> {
    Zero,
    /// One field per layer drawn from a seeded generator, shared across the batch.
    Seeded(u64),
    /// Explicit fields of shape (N or 1) x 1 x r x r, one per layer.
    Fields(Vec<Tensor<T>>),
}

/// Mean style with per-coordinate standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AverageStyle<T> {
    pub mean: Vec<T>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug)]
struct SynthLayer {
    upsample: bool,
    conv: Option<Conv>,
    noise_gain: ParamId,
    bias: ParamId,
    style_scale: Linear,
    style_bias: Linear,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    pub w_avg: Option<AverageStyle<T>>,
    mapping: Vec<Linear>,
    const_input: ParamId,
    layers: Vec<SynthLayer>,
    to_rgb: Conv,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_latent;
        let map_init = Init::Equalized {
            lr_mul: config.mapping_lr_mul,
            gain: ACT_GAIN,
        };
        let mapping = (0..config.mapping_layers)
            .map(|i| Linear::new(&mut params, &format!("mapping.{i}"), d, d, map_init, 0.0, &mut rng))
            .collect();
        let eq = Init::Equalized { lr_mul: 1.0, gain: 1.0 };
        let act = Init::Equalized { lr_mul: 1.0, gain: ACT_GAIN };
        let c4 = config.channels_at(4);
        let const_input = params.add("synthesis.const", Tensor::randn(&[c4, 4, 4], 1.0, &mut rng));
        let mut layers = Vec::new();
        let mut cin = c4;
        for (i, res) in config.layer_resolutions().into_iter().enumerate() {
            let cout = config.channels_at(res);
            let name = format!("synthesis.{i}");
            let conv = (i > 0).then(|| Conv::new(&mut params, &format!("{name}.conv"), cin, cout, 3, 1, false, act, &mut rng));
            layers.push(SynthLayer {
                upsample: i > 0 && i % 2 == 0,
                conv,
                noise_gain: params.add(format!("{name}.noise_gain"), Tensor::zeros(&[cout])),
                bias: params.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
                style_scale: Linear::new(&mut params, &format!("{name}.affine_scale"), d, cout, eq, 1.0, &mut rng),
                style_bias: Linear::new(&mut params, &format!("{name}.affine_bias"), d, cout, eq, 0.0, &mut rng),
            });
            cin = cout;
        }
        let to_rgb = Conv::new(&mut params, "synthesis.to_rgb", cin, 3, 1, 1, true, eq, &mut rng);
        Ok(Self {
            config,
            params,
            w_avg: None,
            mapping,
            const_input,
            layers,
            to_rgb,
        })
    }

    pub fn n_styles(&self) -> usize {
        self.config.n_styles()
    }

    pub fn mapping_layers(&self) -> &[Linear] {
        &self.mapping
    }

    /// Ids of the per-layer noise gains.
    pub fn noise_gains(&self) -> Vec<ParamId> {
        self.layers.iter().map(|l| l.noise_gain).collect()
    }

    pub fn map_graph(&self, g: &mut Graph<T>, z: Var, trainable: bool) -> Var {
        let slope = T::of(self.config.mapping_slope);
        let mut x = z;
        for l in &self.mapping {
            x = l.forward(g, &self.params, x, trainable);
            x = g.leaky_relu(x, slope);
        }
        x
    }

    /// Maps an N x d batch of latents to styles.
    pub fn map_latent(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape.len() != 2 || z.shape[1] != self.config.d_latent {
            return Err(Error::dims(("N", self.config.d_latent), &z.shape));
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let w = self.map_graph(&mut g, zv, false);
        Ok(g.value(w).clone())
    }

    /// Noise fields for a batch of `n`.
    pub fn noise_fields(&self, noise: &Noise<T>, n: usize) -> Result<Vec<Tensor<T>>> {
        let res = self.config.layer_resolutions();
        match noise {
            Noise::Zero => Ok(res.iter().map(|&r| Tensor::zeros(&[1, 1, r, r])).collect()),
            Noise::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(res.iter().map(|&r| Tensor::randn(&[1, 1, r, r], 1.0, &mut rng)).collect())
            }
            Noise::Fields(f) => {
                if f.len() != res.len() {
                    return Err(Error::dims(res.len(), f.len()));
                }
                for (t, &r) in f.iter().zip(&res) {
                    if t.shape.len() != 4 || !(t.shape[0] == 1 || t.shape[0] == n) || t.shape[1..] != [1, r, r] {
                        return Err(Error::dims(("N|1", 1, r, r), &t.shape));
                    }
                }
                Ok(f.clone())
            }
        }
    }

    /// Random per-sample noise for training.
    pub fn random_noise(&self, n: usize, rng: &mut impl Rng) -> Vec<Tensor<T>> {
        self.config
            .layer_resolutions()
            .iter()
            .map(|&r| Tensor::randn(&[n, 1, r, r], 1.0, rng))
            .collect()
    }

    /// Synthesis from N x S x d codes to an N x 3 x R x R batch in `[0, 1]`.
    pub fn synth_graph(&self, g: &mut Graph<T>, codes: Var, noise: &[Tensor<T>], trainable: bool) -> Var {
        let n = g.value(codes).shape[0];
        let p = &self.params;
        let slope = T::of(ACT_SLOPE);
        let c = g.param(p, self.const_input, trainable);
        let mut x = g.broadcast_batch(c, n);
        for (i, l) in self.layers.iter().enumerate() {
            if l.upsample {
                x = g.upsample2x(x);
            }
            if let Some(conv) = &l.conv {
                x = conv.forward(g, p, x, trainable);
            }
            let gain = g.param(p, l.noise_gain, trainable);
            x = g.add_noise(x, gain, noise[i].clone());
            let b = g.param(p, l.bias, trainable);
            x = g.add_channel_bias(x, b);
            x = g.leaky_relu(x, slope);
            let s = g.select(codes, i);
            let sc = l.style_scale.forward(g, p, s, trainable);
            let sb = l.style_bias.forward(g, p, s, trainable);
            x = adain_graph(g, x, sc, sb);
        }
        let rgb = self.to_rgb.forward(g, p, x, trainable);
        let t = g.tanh(rgb);
        let half = g.scale(t, T::of(0.5));
        let shape = g.value(half).shape.clone();
        let offset = g.constant(Tensor::full(&shape, T::of(0.5)));
        g.add(half, offset)
    }

    fn check_codes(&self, codes: &StyleCodes<T>) -> Result<()> {
        if codes.n_styles != self.n_styles() || codes.dim != self.config.d_latent {
            return Err(Error::invalid(format!(
                "expected {} styles of dimension {}, got {} of {}",
                self.n_styles(),
                self.config.d_latent,
                codes.n_styles,
                codes.dim
            )));
        }
        Ok(())
    }

    pub fn synthesize_batch(&self, codes: &[&StyleCodes<T>], noise: &Noise<T>) -> Result<Tensor<T>> {
        for c in codes {
            self.check_codes(c)?;
        }
        let fields = self.noise_fields(noise, codes.len())?;
        let mut g = Graph::new();
        let cv = g.constant(StyleCodes::stack(codes));
        let out = self.synth_graph(&mut g, cv, &fields, false);
        Ok(g.value(out).clone())
    }

    pub fn synthesize(&self, codes: &StyleCodes<T>, noise: &Noise<T>) -> Result<ImageBuffer<T>> {
        let t = self.synthesize_batch(&[codes], noise)?;
        Ok(t.to_images()?.remove(0))
    }

    /// Layers below `crossover` styled by `w_a`, the rest by `w_b`.
    pub fn style_mix_generate(
        &self,
        w_a: &StyleCodes<T>,
        w_b: &StyleCodes<T>,
        crossover: usize,
        noise: &Noise<T>,
    ) -> Result<ImageBuffer<T>> {
        self.synthesize(&StyleCodes::mix(w_a, w_b, crossover)?, noise)
    }

    /// Mean of `samples` mapped latents with per-coordinate standard error.
    pub fn estimate_w_avg(&self, samples: usize, seed: u64) -> Result<AverageStyle<T>> {
        if samples < 2 {
            return Err(Error::invalid("need at least two samples for the average style"));
        }
        let d = self.config.d_latent;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = vec![CompensatedSum::new(); d];
        let mut sq = vec![CompensatedSum::new(); d];
        let mut left = samples;
        while left > 0 {
            let n = left.min(1000);
            let z = Tensor::randn(&[n, d], 1.0, &mut rng);
            let w = self.map_latent(&z)?;
            for row in w.data.chunks(d) {
                for j in 0..d {
                    let v = row[j].as_f64();
                    sum[j].add(v);
                    sq[j].add(v * v);
                }
            }
            left -= n;
        }
        let n = samples as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s.value() / n).collect();
        let stderr = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s.value() - n * m * m).max(0.0) / (n - 1.0) / n).sqrt())
            .collect();
        Ok(AverageStyle {
            mean: mean.into_iter().map(T::of).collect(),
            stderr,
            samples,
        })
    }

    pub fn average_codes(&self) -> Result<StyleCodes<T>> {
        let w = self
            .w_avg
            .as_ref()
            .ok_or_else(|| Error::Config("generator has no average style".into()))?;
        Ok(StyleCodes::broadcast(&w.mean, self.n_styles()))
    }
}

/// Instance normalization followed by per-channel style scale and bias.
pub fn adain_graph<T: Real>(g: &mut Graph<T>, x: Var, scale: Var, bias: Var) -> Var {
    let normed = g.instance_norm(x, T::of(ADAIN_EPS));
    g.modulate(normed, scale, bias)
}

/// AdaIN on an N x C x H x W tensor with one scale and bias per channel.
pub fn adain<T: Real>(features: &Tensor<T>, scale: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let [n, c, _, _] = features.shape[..] else {
        return Err(Error::invalid(format!("expected NCHW features, got {:?}", features.shape)));
    };
    if scale.len() != c || bias.len() != c {
        return Err(Error::dims(c, (scale.len(), bias.len())));
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let rep = |v: &[T]| Tensor::new(vec![n, c], (0..n).flat_map(|_| v.iter().copied()).collect());
    let s = g.constant(rep(scale));
    let b = g.constant(rep(bias));
    let y = adain_graph(&mut g, x, s, b);
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub params: ParamStore<T>,
    from_rgb: Conv,
    blocks: Vec<Conv>,
    final_conv: Conv,
    fc: Linear,
    out: Linear,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let eq = Init::Equalized { lr_mul: 1.0, gain: 1.0 };
        let act = Init::Equalized { lr_mul: 1.0, gain: ACT_GAIN };
        let top = config.channels_at(config.resolution);
        let from_rgb = Conv::new(&mut params, "disc.from_rgb", 3, top, 1, 1, true, act, &mut rng);
        let mut blocks = Vec::new();
        let mut res = config.resolution;
        while res > 4 {
            let (cin, cout) = (config.channels_at(res), config.channels_at(res / 2));
            blocks.push(Conv::new(&mut params, &format!("disc.block{res}"), cin, cout, 3, 1, true, act, &mut rng));
            res /= 2;
        }
        let c4 = config.channels_at(4);
        let final_conv = Conv::new(&mut params, "disc.final_conv", c4 + 1, c4, 3, 1, true, act, &mut rng);
        let fc = Linear::new(&mut params, "disc.fc", c4 * 16, c4, act, 0.0, &mut rng);
        let out = Linear::new(&mut params, "disc.out", c4, 1, eq, 0.0, &mut rng);
        Ok(Self {
            params,
            from_rgb,
            blocks,
            final_conv,
            fc,
            out,
        })
    }

    /// Logits of shape N x 1.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Var {
        let p = &self.params;
        let slope = T::of(ACT_SLOPE);
        let mut h = self.from_rgb.forward(g, p, x, trainable);
        h = g.leaky_relu(h, slope);
        for b in &self.blocks {
            h = b.forward(g, p, h, trainable);
            h = g.leaky_relu(h, slope);
            h = g.pool(h, 2);
        }
        h = g.minibatch_std(h, MBSTD_GROUP);
        h = self.final_conv.forward(g, p, h, trainable);
        h = g.leaky_relu(h, slope);
        let n = g.value(h).shape[0];
        let width = g.value(h).len() / n;
        h = g.reshape(h, &[n, width]);
        h = self.fc.forward(g, p, h, trainable);
        h = g.leaky_relu(h, slope);
        self.out.forward(g, p, h, trainable)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Vec<T> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, xv, false);
        g.value(y).data.clone()
    }

    /// R1 penalty of this discriminator on a real batch.
    pub fn r1_penalty(&self, real: &Tensor<T>, gamma: T) -> T {
        r1_penalty(|g, x| self.forward_graph(g, x, false), real, gamma)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn mean<T: Real>(v: impl Iterator<Item = T>) -> T {
    let mut s = CompensatedSum::new();
    let mut n = 0usize;
    for x in v {
        s.add(x.as_f64());
        n += 1;
    }
    T::of(s.value() / n as f64)
}

/// Non-saturating generator loss: mean softplus(-D(G(z))).
pub fn g_loss<T: Real>(fake_logits: &[T]) -> T {
    mean(fake_logits.iter().map(|l| softplus(-*l)))
}

/// Discriminator loss: mean softplus(-D(x)) + mean softplus(D(G(z))).
pub fn d_loss<T: Real>(real_logits: &[T], fake_logits: &[T]) -> T {
    mean(real_logits.iter().map(|l| softplus(-*l))) + mean(fake_logits.iter().map(|l| softplus(*l)))
}

/// Per-sample gradients of `d` with respect to its input.
fn input_gradients<T: Real>(d: impl Fn(&mut Graph<T>, Var) -> Var, real: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.input(real.clone());
    let logits = d(&mut g, x);
    let s = g.sum(logits);
    g.backward(s).get(x).cloned().unwrap_or_else(|| Tensor::zeros(&real.shape))
}

/// (γ/2) · mean over the batch of ‖∇ₓ D(x)‖².
pub fn r1_penalty<T: Real>(d: impl Fn(&mut Graph<T>, Var) -> Var, real: &Tensor<T>, gamma: T) -> T {
    let grads = input_gradients(d, real);
    let n = real.shape[0];
    let per = grads.len() / n;
    let sq = mean((0..n).map(|i| grads.data[i * per..(i + 1) * per].iter().map(|v| *v * *v).sum::<T>()));
    gamma * T::of(0.5) * sq
}

/// Parameter gradient of the R1 penalty.
///
/// With v = ∇ₓD(x) and u = v/‖v‖, ∇θ ‖v‖² = 2‖v‖ ∇θ (∂D/∂u), and the
/// directional derivative is taken by central differences with step `delta`.
pub fn r1_param_grads<T: Real>(
    disc: &Discriminator<T>,
    real: &Tensor<T>,
    gamma: T,
    delta: T,
) -> (T, Vec<(ParamId, Tensor<T>)>) {
    let grads = input_gradients(|g, x| disc.forward_graph(g, x, false), real);
    let n = real.shape[0];
    let per = grads.len() / n;
    let mut shifted = Vec::with_capacity(2 * real.len());
    let mut weights = vec![T::zero(); 2 * n];
    let mut sq = Vec::with_capacity(n);
    for sign in [T::one(), -T::one()] {
        for i in 0..n {
            let v = &grads.data[i * per..(i + 1) * per];
            let norm = v.iter().map(|a| *a * *a).sum::<T>().sqrt();
            let x = &real.data[i * per..(i + 1) * per];
            if norm > T::zero() {
                shifted.extend(x.iter().zip(v).map(|(a, b)| *a + sign * delta * *b / norm));
            } else {
                shifted.extend_from_slice(x);
            }
            if sign > T::zero() {
                sq.push(norm * norm);
                weights[i] = gamma * norm / (T::of(n as f64) * T::of(2.0) * delta);
            } else {
                weights[n + i] = -weights[i];
            }
        }
    }
    let value = gamma * T::of(0.5) * mean(sq.into_iter());
    // The two shifted batches go through separately so that batch statistics
    // inside the discriminator never mix them.
    let mut g = Graph::new();
    let half = real.len();
    let xp = g.constant(Tensor::new(real.shape.clone(), shifted[..half].to_vec()));
    let xm = g.constant(Tensor::new(real.shape.clone(), shifted[half..].to_vec()));
    let lp = disc.forward_graph(&mut g, xp, true);
    let lm = disc.forward_graph(&mut g, xm, true);
    let wp = g.constant(Tensor::new(vec![n, 1], weights[..n].to_vec()));
    let wm = g.constant(Tensor::new(vec![n, 1], weights[n..].to_vec()));
    let a = g.mul(lp, wp);
    let b = g.mul(lm, wm);
    let ab = g.add(a, b);
    let obj = g.sum(ab);
    (value, g.backward(obj).param_grads(&disc.params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: (f64, f64),
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub seed: u64,
    pub w_avg_samples: usize,
    /// Save a last-good checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr_g: 2e-3,
            lr_d: 2e-3,
            betas: (0.0, 0.99),
            r1_gamma: 10.0,
            r1_interval: 16,
            seed: 0,
            w_avg_samples: 10_000,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for 16x16 toy runs. R1 strength follows `2e-4 * R^2 / batch`,
    /// and the generator steps at a quarter of the discriminator's rate so the
    /// small discriminator is not overrun.
    pub fn toy() -> Self {
        let batch = 8;
        Self {
            batch,
            lr_g: 5e-4,
            r1_gamma: 2e-4 * 16.0 * 16.0 / batch as f64,
            ..Self::default()
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr_g = lr;
        self.lr_d = lr;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogRow {
    pub step: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub r1: f64,
}

pub struct TrainedGan<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub log: Vec<GanLogRow>,
}

pub fn write_gan_log(rows: &[GanLogRow], path: &Path) -> Result<()> {
    let mut s = String::from("step,g_loss,d_loss,r1\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.g_loss, r.d_loss, r.r1));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn sample_batch<T: Real>(images: &[ImageBuffer<T>], n: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let picks: Vec<&ImageBuffer<T>> = (0..n).map(|_| &images[rng.random_range(0..images.len())]).collect();
    Tensor::from_images(&picks)
}

/// Adversarial training of a fresh generator/discriminator pair on `images`.
///
/// When `checkpoint_dir` is set and `checkpoint_every > 0`, the generator is
/// saved there periodically; a non-finite loss aborts with a reference to the
/// last such checkpoint.
pub fn train_generator<T: Real>(
    images: &[ImageBuffer<T>],
    config: &GeneratorConfig,
    train: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedGan<T>> {
    let generator = Generator::new(config.clone(), train.seed)?;
    let discriminator = Discriminator::new(config, train.seed.wrapping_add(1))?;
    continue_training(generator, discriminator, images, train, checkpoint_dir)
}

pub fn continue_training<T: Real>(
    mut generator: Generator<T>,
    mut discriminator: Discriminator<T>,
    images: &[ImageBuffer<T>],
    train: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedGan<T>> {
    let config = generator.config.clone();
    if images.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(bad) = images.iter().find(|i| i.dims() != (config.resolution, config.resolution)) {
        return Err(Error::invalid(format!(
            "training image is {}x{}, generator resolution is {}",
            bad.height(),
            bad.width(),
            config.resolution
        )));
    }
    if train.batch == 0 || train.r1_interval == 0 {
        return Err(Error::Config("batch size and R1 interval must be positive".into()));
    }
    let images: Vec<ImageBuffer<T>> = images.iter().map(|i| i.to_rgb()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_da7a);
    let mut opt_g = Adam::new(&generator.params, train.lr_g, train.betas);
    let mut opt_d = Adam::new(&discriminator.params, train.lr_d, train.betas);
    let gamma = T::of(train.r1_gamma);
    let d = config.d_latent;
    let b = train.batch;
    let mut log = Vec::with_capacity(train.steps);
    let mut last_good: Option<PathBuf> = None;
    let mut r1_value = 0.0;

    for step in 0..train.steps {
        // Discriminator.
        let real = sample_batch(&images, b, &mut rng)?;
        let z = Tensor::randn(&[b, d], 1.0, &mut rng);
        let noise = generator.random_noise(b, &mut rng);
        let fake = {
            let mut g = Graph::new();
            let zv = g.constant(z);
            let w = generator.map_graph(&mut g, zv, false);
            let codes = broadcast_styles(&mut g, w, config.n_styles());
            let img = generator.synth_graph(&mut g, codes, &noise, false);
            g.value(img).clone()
        };
        let mut g = Graph::new();
        let rv = g.constant(real.clone());
        let fv = g.constant(fake);
        let rl = discriminator.forward_graph(&mut g, rv, true);
        let fl = discriminator.forward_graph(&mut g, fv, true);
        let neg = g.scale(rl, -T::one());
        let sr = g.softplus(neg);
        let sf = g.softplus(fl);
        let mr = g.mean(sr);
        let mf = g.mean(sf);
        let ld = g.add(mr, mf);
        let d_loss_v = g.value(ld).item();
        let mut grads = g.backward(ld).param_grads(&discriminator.params);
        if step % train.r1_interval == 0 && train.r1_gamma > 0.0 {
            let lazy = gamma * T::of(train.r1_interval as f64);
            let (value, rg) = r1_param_grads(&discriminator, &real, lazy, T::of(1e-3));
            r1_value = (value / T::of(train.r1_interval as f64)).as_f64();
            for ((_, a), (_, r)) in grads.iter_mut().zip(&rg) {
                for (p, q) in a.data.iter_mut().zip(&r.data) {
                    *p += *q;
                }
            }
        }
        opt_d.step(&mut discriminator.params, &grads);

        // Generator.
        let z = Tensor::randn(&[b, d], 1.0, &mut rng);
        let noise = generator.random_noise(b, &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let w = generator.map_graph(&mut g, zv, true);
        let codes = broadcast_styles(&mut g, w, config.n_styles());
        let img = generator.synth_graph(&mut g, codes, &noise, true);
        let fl = discriminator.forward_graph(&mut g, img, false);
        let neg = g.scale(fl, -T::one());
        let sp = g.softplus(neg);
        let lg = g.mean(sp);
        let g_loss_v = g.value(lg).item();
        let grads = g.backward(lg).param_grads(&generator.params);
        opt_g.step(&mut generator.params, &grads);

        let row = GanLogRow {
            step,
            g_loss: g_loss_v.as_f64(),
            d_loss: d_loss_v.as_f64(),
            r1: r1_value,
        };
        let finite = row.g_loss.is_finite()
            && row.d_loss.is_finite()
            && row.r1.is_finite()
            && generator.params.all_finite()
            && discriminator.params.all_finite();
        if !finite {
            return Err(Error::NonFinite {
                what: "adversarial training state".into(),
                step,
                last_good,
            });
        }
        log.push(row);
        if let Some(dir) = checkpoint_dir {
            if train.checkpoint_every > 0 && (step + 1) % train.checkpoint_every == 0 {
                let path = dir.join("last_good.json");
                crate::checkpoint::GeneratorCheckpoint::from_models(&generator, Some(&discriminator), step + 1, train.seed)
                    .save(&path)?;
                last_good = Some(path);
            }
        }
    }
    generator.w_avg = Some(generator.estimate_w_avg(train.w_avg_samples, train.seed ^ 0xa7e5)?);
    Ok(TrainedGan {
        generator,
        discriminator,
        log,
    })
}

/// Repeats an N x d style batch into N x S x d codes.
pub fn broadcast_styles<T: Real>(g: &mut Graph<T>, w: Var, n_styles: usize) -> Var {
    let parts = vec![w; n_styles];
    g.stack(&parts)
}
