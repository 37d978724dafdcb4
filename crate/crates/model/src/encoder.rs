//! Feature-pyramid encoder predicting W+ offsets, iterative refinement and
//! the four-term reconstruction objective.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cforge_core::{Error, ImageBuffer, Result};

use crate::embedders::{StubFeatureExtractor, StubIdentityEmbedder};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Conv, Init, Linear, ParamId, ParamStore};
use crate::real::Real;
use crate::stylegen::{Generator, GeneratorConfig, Noise, StyleCodes};
use crate::tensor::Tensor;

const ACT_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Feature maps throughout the backbone, pyramid and heads.
    pub width: usize,
    /// Init gain of each head's final linear layer; small values start the
    /// encoder near the zero offset.
    pub head_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { width: 32, head_gain: 0.1 }
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self { width: 16, ..Self::default() }
    }
}

/// Style counts served by the coarse, medium and fine pyramid levels.
///
/// Three and four styles go to the coarse and medium levels and the rest to
/// the fine one. Below eight styles the same 3:4:7 proportions are rounded,
/// keeping at least one style per level.
pub fn style_split(n_styles: usize) -> (usize, usize, usize) {
    assert!(n_styles >= 3, "need at least three styles");
    if n_styles >= 8 {
        return (3, 4, n_styles - 7);
    }
    let coarse = ((n_styles * 3) as f64 / 14.0).round().max(1.0) as usize;
    let medium = ((n_styles * 4) as f64 / 14.0).round().max(1.0) as usize;
    (coarse, medium, n_styles - coarse - medium)
}

#[derive(Clone, Debug)]
struct Head {
    level: usize,
    convs: Vec<Conv>,
    fc: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
    pub resolution: usize,
    pub n_styles: usize,
    pub d_latent: usize,
    stem: Conv,
    stages: Vec<(Conv, Conv)>,
    laterals: [Conv; 3],
    /// Resolution of the coarse, medium and fine taps.
    taps: [usize; 3],
    heads: Vec<Head>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, generator: &GeneratorConfig, seed: u64) -> Result<Self> {
        generator.validate()?;
        if config.width == 0 || !(config.head_gain > 0.0) {
            return Err(Error::Config("encoder width and head gain must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let res = generator.resolution;
        let c = config.width;
        let he = Init::Standard { gain: 2f64.sqrt() };
        let stem = Conv::new(&mut params, "enc.stem", 6, c, 3, 1, true, he, &mut rng);
        let taps = [(res / 32).max(1), (res / 16).max(1), (res / 8).max(1)];
        let mut stages = Vec::new();
        let mut r = res;
        while r > taps[0] {
            let a = Conv::new(&mut params, &format!("enc.stage{r}.a"), c, c, 3, 1, true, he, &mut rng);
            let b = Conv::new(&mut params, &format!("enc.stage{r}.b"), c, c, 3, 1, true, he, &mut rng);
            stages.push((a, b));
            r /= 2;
        }
        let laterals = ["coarse", "medium", "fine"]
            .map(|n| Conv::new(&mut params, &format!("enc.lateral.{n}"), c, c, 1, 1, true, Init::Standard { gain: 1.0 }, &mut rng));
        let n_styles = generator.n_styles();
        let (nc, nm, _) = style_split(n_styles);
        let mut heads = Vec::with_capacity(n_styles);
        for i in 0..n_styles {
            let level = if i < nc {
                0
            } else if i < nc + nm {
                1
            } else {
                2
            };
            let mut convs = Vec::new();
            let mut r = taps[level];
            loop {
                let stride = if r > 1 { 2 } else { 1 };
                let k = convs.len();
                convs.push(Conv::new(&mut params, &format!("enc.head{i}.conv{k}"), c, c, 3, stride, true, he, &mut rng));
                r /= stride;
                if r == 1 {
                    break;
                }
            }
            let fc = Linear::new(
                &mut params,
                &format!("enc.head{i}.fc"),
                c,
                generator.d_latent,
                Init::Standard { gain: config.head_gain },
                0.0,
                &mut rng,
            );
            heads.push(Head { level, convs, fc });
        }
        Ok(Self {
            config,
            params,
            resolution: res,
            n_styles,
            d_latent: generator.d_latent,
            stem,
            stages,
            laterals,
            taps,
            heads,
        })
    }

    pub fn compatible_with(&self, g: &Generator<T>) -> Result<()> {
        if (self.resolution, self.n_styles, self.d_latent) != (g.config.resolution, g.n_styles(), g.config.d_latent) {
            return Err(Error::Config(format!(
                "encoder expects {}px with {} styles of {}, generator is {}px with {} of {}",
                self.resolution,
                self.n_styles,
                self.d_latent,
                g.config.resolution,
                g.n_styles(),
                g.config.d_latent
            )));
        }
        Ok(())
    }

    /// N x 6 x R x R (image stacked with the current reconstruction) to an
    /// N x S x d offset.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Var {
        let p = &self.params;
        let slope = T::of(ACT_SLOPE);
        let mut h = self.stem.forward(g, p, x, trainable);
        h = g.leaky_relu(h, slope);
        let mut r = self.resolution;
        let mut feats = vec![(r, h)];
        for (a, b) in &self.stages {
            let mut y = a.forward(g, p, h, trainable);
            y = g.leaky_relu(y, slope);
            y = b.forward(g, p, y, trainable);
            h = g.add(h, y);
            h = g.leaky_relu(h, slope);
            h = g.pool(h, 2);
            r /= 2;
            feats.push((r, h));
        }
        let at = |res: usize| feats.iter().find(|(r, _)| *r == res).map(|(_, v)| *v).expect("tap resolution");
        let mut pyramid = [at(self.taps[0]); 3];
        pyramid[0] = self.laterals[0].forward(g, p, at(self.taps[0]), trainable);
        for level in 1..3 {
            let lat = self.laterals[level].forward(g, p, at(self.taps[level]), trainable);
            let mut top = pyramid[level - 1];
            if self.taps[level] > self.taps[level - 1] {
                top = g.upsample2x(top);
            }
            pyramid[level] = g.add(lat, top);
        }
        let n = g.value(x).shape[0];
        let styles: Vec<Var> = self
            .heads
            .iter()
            .map(|head| {
                let mut y = pyramid[head.level];
                for conv in &head.convs {
                    y = conv.forward(g, p, y, trainable);
                    y = g.leaky_relu(y, slope);
                }
                let y = g.reshape(y, &[n, self.config.width]);
                head.fc.forward(g, p, y, trainable)
            })
            .collect();
        g.stack(&styles)
    }

    fn check_input(&self, image: &ImageBuffer<T>) -> Result<()> {
        if image.dims() != (self.resolution, self.resolution) {
            return Err(Error::invalid(format!(
                "image is {}x{}, encoder expects {}x{}",
                image.height(),
                image.width(),
                self.resolution,
                self.resolution
            )));
        }
        Ok(())
    }

    /// Offset predicted for `image` given the current reconstruction.
    pub fn encode(&self, image: &ImageBuffer<T>, current: &ImageBuffer<T>) -> Result<StyleCodes<T>> {
        self.check_input(image)?;
        self.check_input(current)?;
        let (x, y) = (image.to_rgb(), current.to_rgb());
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_images(&[&x])?);
        let yv = g.constant(Tensor::from_images(&[&y])?);
        let inp = g.concat_channels(&[xv, yv]);
        let out = self.encode_graph(&mut g, inp, false);
        StyleCodes::new(self.n_styles, self.d_latent, g.value(out).data.clone())
    }
}

/// Projection output: final image, codes and every refinement step.
#[derive(Clone, Debug)]
pub struct ProjectionResult<T> {
    pub final_image: ImageBuffer<T>,
    pub codes: StyleCodes<T>,
    pub intermediates: Vec<ImageBuffer<T>>,
    pub intermediate_codes: Vec<StyleCodes<T>>,
    pub background_blended: Option<ImageBuffer<T>>,
    /// Caricature the codes were projected from, when there was one.
    pub caricature: Option<ImageBuffer<T>>,
}

/// Noise used for every projection: the learned noise inputs are disabled.
pub fn projection_noise<T>() -> Noise<T> {
    Noise::Zero
}

/// Starts at the average style and applies `n_iter` encoder offsets, each
/// conditioned on the previous reconstruction.
pub fn iterative_project<T: Real>(
    image: &ImageBuffer<T>,
    encoder: &Encoder<T>,
    generator: &Generator<T>,
    n_iter: usize,
) -> Result<ProjectionResult<T>> {
    iterative_project_with(image, generator, n_iter, |x, y| encoder.encode(x, y), Some(encoder))
}

/// [`iterative_project`] with an arbitrary offset predictor.
pub fn iterative_project_with<T: Real>(
    image: &ImageBuffer<T>,
    generator: &Generator<T>,
    n_iter: usize,
    mut predict: impl FnMut(&ImageBuffer<T>, &ImageBuffer<T>) -> Result<StyleCodes<T>>,
    encoder: Option<&Encoder<T>>,
) -> Result<ProjectionResult<T>> {
    if n_iter == 0 {
        return Err(Error::invalid("projection needs at least one iteration"));
    }
    if let Some(e) = encoder {
        e.compatible_with(generator)?;
    }
    let x = image.to_rgb();
    let noise = projection_noise();
    let mut codes = generator.average_codes()?;
    let mut current = generator.synthesize(&codes, &noise)?;
    let mut intermediates = Vec::with_capacity(n_iter);
    let mut intermediate_codes = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let delta = predict(&x, &current)?;
        codes = codes.add(&delta)?;
        if codes.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "projected style codes".into(),
                step: intermediates.len(),
                last_good: None,
            });
        }
        current = generator.synthesize(&codes, &noise)?;
        intermediates.push(current.clone());
        intermediate_codes.push(codes.clone());
    }
    Ok(ProjectionResult {
        final_image: current,
        codes,
        intermediates,
        intermediate_codes,
        background_blended: None,
        caricature: None,
    })
}

/// The λ coefficients of the pixel, perceptual, identity and latent terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l2: f64,
    pub lpips: f64,
    pub id: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2: 1.0,
            lpips: 0.8,
            id: 0.5,
            reg: 0.005,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            l2: 0.0,
            lpips: 0.0,
            id: 0.0,
            reg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.l2, self.lpips, self.id, self.reg].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn combine(&self, l2: f64, lpips: f64, id: f64, reg: f64) -> f64 {
        self.l2 * l2 + self.lpips * lpips + self.id * id + self.reg * reg
    }
}

/// Loss components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub lpips: f64,
    pub id: f64,
    pub reg: f64,
    pub total: f64,
}

/// The embedders the objective is evaluated with.
#[derive(Clone, Debug)]
pub struct LossAdapters<T> {
    pub feature: StubFeatureExtractor<T>,
    pub identity: StubIdentityEmbedder<T>,
}

impl<T: Real> LossAdapters<T> {
    pub fn stub(seed: u64) -> Self {
        Self {
            feature: StubFeatureExtractor::new(seed),
            identity: StubIdentityEmbedder::new(seed.wrapping_add(1), 32),
        }
    }
}

/// Component nodes of the objective, each averaged over the batch.
pub struct LossNodes {
    pub l2: Var,
    pub lpips: Var,
    pub id: Var,
    pub reg: Var,
    pub total: Var,
}

/// Builds the objective for targets `x`, reconstructions `y` (both N x 3 x R x R)
/// and codes (N x S x d) against the average style `w_avg`.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    y: Var,
    codes: Var,
    w_avg: &[T],
    weights: &LossWeights,
    adapters: &LossAdapters<T>,
) -> LossNodes {
    let diff = g.sub(x, y);
    let sq = g.mul(diff, diff);
    let l2 = g.mean(sq);
    let dist = adapters.feature.distance(g, x, y);
    let lpips = g.mean(dist);
    let idl = adapters.identity.id_loss(g, x, y);
    let id = g.mean(idl);
    let [n, s, d] = g.value(codes).shape[..] else {
        panic!("codes must be N x S x d")
    };
    let rows = g.reshape(codes, &[n * s, d]);
    let avg = g.constant(Tensor::new(vec![n * s, d], (0..n * s).flat_map(|_| w_avg.iter().copied()).collect()));
    let off = g.sub(rows, avg);
    let norms = g.row_norm(off);
    let reg = g.mean(norms);
    let terms = [(l2, weights.l2), (lpips, weights.lpips), (id, weights.id), (reg, weights.reg)];
    let mut total = g.scale(terms[0].0, T::of(terms[0].1));
    for (v, w) in &terms[1..] {
        let t = g.scale(*v, T::of(*w));
        total = g.add(total, t);
    }
    LossNodes { l2, lpips, id, reg, total }
}

fn breakdown<T: Real>(g: &Graph<T>, nodes: &LossNodes) -> LossBreakdown {
    let v = |x: Var| g.value(x).item().as_f64();
    LossBreakdown {
        l2: v(nodes.l2),
        lpips: v(nodes.lpips),
        id: v(nodes.id),
        reg: v(nodes.reg),
        total: v(nodes.total),
    }
}

/// Mean over styles of ‖wᵢ − w̄‖.
pub fn reg_loss<T: Real>(codes: &StyleCodes<T>, w_avg: &[T]) -> Result<T> {
    if w_avg.len() != codes.dim {
        return Err(Error::dims(codes.dim, w_avg.len()));
    }
    let total: T = (0..codes.n_styles)
        .map(|i| {
            codes
                .style(i)
                .iter()
                .zip(w_avg)
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .sum::<T>()
                .sqrt()
        })
        .sum();
    Ok(total / T::of(codes.n_styles as f64))
}

fn pair_graph<T: Real>(x: &ImageBuffer<T>, y: &ImageBuffer<T>) -> Result<(Graph<T>, Var, Var)> {
    x.ensure_same_shape(y)?;
    let mut g = Graph::new();
    let xv = g.constant(Tensor::from_images(&[&x.to_rgb()])?);
    let yv = g.constant(Tensor::from_images(&[&y.to_rgb()])?);
    Ok((g, xv, yv))
}

/// `1 - <a, b>` for unit-norm embeddings.
pub fn cosine_id_loss<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(T::one() - a.iter().zip(b).map(|(p, q)| *p * *q).sum::<T>())
}

pub fn l2_loss<T: Real>(x: &ImageBuffer<T>, y: &ImageBuffer<T>) -> Result<T> {
    cforge_core::metrics::l2_metric(x, y)
}

pub fn perceptual_loss<T: Real>(x: &ImageBuffer<T>, y: &ImageBuffer<T>, f: &StubFeatureExtractor<T>) -> Result<T> {
    let (mut g, xv, yv) = pair_graph(x, y)?;
    let d = f.distance(&mut g, xv, yv);
    Ok(g.value(d).item())
}

pub fn id_loss<T: Real>(x: &ImageBuffer<T>, y: &ImageBuffer<T>, a: &StubIdentityEmbedder<T>) -> Result<T> {
    let (mut g, xv, yv) = pair_graph(x, y)?;
    let d = a.id_loss(&mut g, xv, yv);
    Ok(g.value(d).item())
}

/// Objective for one target/reconstruction pair with its codes.
pub fn total_loss<T: Real>(
    x: &ImageBuffer<T>,
    y: &ImageBuffer<T>,
    codes: &StyleCodes<T>,
    w_avg: &[T],
    weights: &LossWeights,
    adapters: &LossAdapters<T>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if w_avg.len() != codes.dim {
        return Err(Error::dims(codes.dim, w_avg.len()));
    }
    let (mut g, xv, yv) = pair_graph(x, y)?;
    let cv = g.constant(codes.to_tensor());
    let nodes = loss_graph(&mut g, xv, yv, cv, w_avg, weights, adapters);
    Ok(breakdown(&g, &nodes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weights: LossWeights,
    /// Refinement passes per batch; each pass is its own optimizer step.
    pub train_iters: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            lr: 1e-4,
            betas: (0.9, 0.999),
            weights: LossWeights::default(),
            train_iters: 1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl EncoderTrainConfig {
    /// Longer, faster schedule for toy projection runs. Two refinement passes
    /// per batch teach the encoder to correct its own reconstructions.
    pub fn toy() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            train_iters: 2,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLogRow {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn write_encoder_log(rows: &[EncoderLogRow], path: &Path) -> Result<()> {
    let mut s = String::from("step,l2,lpips,id,reg,total\n");
    for r in rows {
        let l = &r.loss;
        s.push_str(&format!("{},{},{},{},{},{}\n", r.step, l.l2, l.lpips, l.id, l.reg, l.total));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub struct TrainedEncoder<T> {
    pub encoder: Encoder<T>,
    pub log: Vec<EncoderLogRow>,
    pub generator_hash_before: String,
    pub generator_hash_after: String,
}

/// Everything a refinement pass needs that does not depend on the encoder.
struct PassInput<T> {
    targets: Tensor<T>,
    current: Tensor<T>,
    codes: Tensor<T>,
}

/// One refinement pass through encoder, frozen generator and objective.
fn pass_graph<T: Real>(
    g: &mut Graph<T>,
    encoder: &Encoder<T>,
    generator: &Generator<T>,
    input: &PassInput<T>,
    weights: &LossWeights,
    adapters: &LossAdapters<T>,
    w_avg: &[T],
) -> (LossNodes, Var, Var) {
    let x = g.constant(input.targets.clone());
    let y0 = g.constant(input.current.clone());
    let inp = g.concat_channels(&[x, y0]);
    let delta = encoder.encode_graph(g, inp, true);
    let base = g.constant(input.codes.clone());
    let codes = g.add(base, delta);
    let n = input.targets.shape[0];
    let noise = generator
        .noise_fields(&projection_noise(), n)
        .expect("zero noise always matches the generator");
    let y = generator.synth_graph(g, codes, &noise, false);
    let nodes = loss_graph(g, x, y, codes, w_avg, weights, adapters);
    (nodes, codes, y)
}

/// Trains a fresh encoder against a frozen generator.
pub fn train_encoder<T: Real>(
    images: &[ImageBuffer<T>],
    generator: &Generator<T>,
    encoder_config: &EncoderConfig,
    train: &EncoderTrainConfig,
    adapters: &LossAdapters<T>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedEncoder<T>> {
    let encoder = Encoder::new(encoder_config.clone(), &generator.config, train.seed)?;
    continue_encoder_training(encoder, images, generator, train, adapters, checkpoint_dir)
}

pub fn continue_encoder_training<T: Real>(
    mut encoder: Encoder<T>,
    images: &[ImageBuffer<T>],
    generator: &Generator<T>,
    train: &EncoderTrainConfig,
    adapters: &LossAdapters<T>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedEncoder<T>> {
    train.weights.validate()?;
    encoder.compatible_with(generator)?;
    if images.is_empty() {
        return Err(Error::invalid("encoder training set is empty"));
    }
    if train.batch == 0 || train.train_iters == 0 {
        return Err(Error::Config("batch size and refinement passes must be positive".into()));
    }
    for im in images {
        encoder.check_input(im)?;
    }
    let hash_before = generator.params.hash();
    let images: Vec<ImageBuffer<T>> = images.iter().map(|i| i.to_rgb()).collect();
    let start = generator.average_codes()?;
    let w_avg = start.style(0).to_vec();
    let b = train.batch;
    let start_codes = StyleCodes::stack(&vec![&start; b]);
    let start_image = generator.synthesize_batch(&vec![&start; b], &projection_noise())?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xe2c0_de00);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = Adam::new(&encoder.params, train.lr, train.betas);
    let mut log = Vec::with_capacity(train.steps);
    let mut last_good: Option<PathBuf> = None;
    for step in 0..train.steps {
        let mut picks = Vec::with_capacity(b);
        while picks.len() < b {
            if order.is_empty() {
                order = (0..images.len()).collect();
                order.shuffle(&mut rng);
            }
            picks.push(&images[order.pop().unwrap()]);
        }
        let mut input = PassInput {
            targets: Tensor::from_images(&picks)?,
            current: start_image.clone(),
            codes: start_codes.clone(),
        };
        let mut row = None;
        for _ in 0..train.train_iters {
            let mut g = Graph::new();
            let (nodes, codes, y) = pass_graph(&mut g, &encoder, generator, &input, &train.weights, adapters, &w_avg);
            let loss = breakdown(&g, &nodes);
            let grads = g.backward(nodes.total).param_grads(&encoder.params);
            opt.step(&mut encoder.params, &grads);
            input.codes = g.value(codes).clone();
            input.current = g.value(y).clone();
            row.get_or_insert(EncoderLogRow { step, loss });
        }
        let row = row.expect("at least one pass");
        let finite = [row.loss.l2, row.loss.lpips, row.loss.id, row.loss.reg, row.loss.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !encoder.params.all_finite() {
            return Err(Error::NonFinite {
                what: "encoder training state".into(),
                step,
                last_good,
            });
        }
        log.push(row);
        if let Some(dir) = checkpoint_dir {
            if train.checkpoint_every > 0 && (step + 1) % train.checkpoint_every == 0 {
                let path = dir.join("encoder_last_good.json");
                crate::checkpoint::EncoderCheckpoint::from_model(&encoder, hash_before.clone(), step + 1, train.seed)
                    .save(&path)?;
                last_good = Some(path);
            }
        }
    }
    let hash_after = generator.params.hash();
    Ok(TrainedEncoder {
        encoder,
        log,
        generator_hash_before: hash_before,
        generator_hash_after: hash_after,
    })
}

/// Analytic and central-difference derivative of the objective for one
/// encoder parameter coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientSample {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares backpropagated gradients of one refinement pass with central
/// differences of step `h` on `count` randomly chosen encoder coordinates.
pub fn gradient_check<T: Real>(
    encoder: &Encoder<T>,
    generator: &Generator<T>,
    images: &[ImageBuffer<T>],
    weights: &LossWeights,
    adapters: &LossAdapters<T>,
    count: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradientSample>> {
    encoder.compatible_with(generator)?;
    let start = generator.average_codes()?;
    let w_avg = start.style(0).to_vec();
    let refs: Vec<&ImageBuffer<T>> = images.iter().collect();
    let n = refs.len();
    let input = PassInput {
        targets: Tensor::from_images(&refs)?,
        current: generator.synthesize_batch(&vec![&start; n], &projection_noise())?,
        codes: StyleCodes::stack(&vec![&start; n]),
    };
    let eval = |e: &Encoder<T>| -> f64 {
        let mut g = Graph::new();
        let (nodes, _, _) = pass_graph(&mut g, e, generator, &input, weights, adapters, &w_avg);
        g.value(nodes.total).item().as_f64()
    };
    let mut g = Graph::new();
    let (nodes, _, _) = pass_graph(&mut g, encoder, generator, &input, weights, adapters, &w_avg);
    let grads = g.backward(nodes.total).param_grads(&encoder.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = encoder.params.ids().collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = ids[rng.random_range(0..ids.len())];
        let index = rng.random_range(0..encoder.params.get(id).len());
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.data[index].as_f64())
            .unwrap_or(0.0);
        let mut probe = encoder.clone();
        let v = probe.params.get(id).data[index];
        probe.params.get_mut(id).data[index] = v + T::of(h);
        let up = eval(&probe);
        probe.params.get_mut(id).data[index] = v - T::of(h);
        let down = eval(&probe);
        out.push(GradientSample {
            param: encoder.params.name(id).to_string(),
            index,
            analytic,
            numeric: (up - down) / (2.0 * h),
        });
    }
    Ok(out)
}
