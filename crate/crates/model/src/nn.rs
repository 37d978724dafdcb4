//! Parameters, layers and the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cforge_core::{Error, Result};

use crate::graph::{ConvSpec, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// sha256 over names, shapes and values widened to little-endian f64.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            for d in &e.tensor.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &e.tensor.data {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: Tensor::new(e.tensor.shape.clone(), e.tensor.data.iter().map(|v| U::of(v.as_f64())).collect()),
                })
                .collect(),
        }
    }

    /// Replaces every tensor with the same-named one from `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .find(&e.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", e.name)))?;
            if src.shape != e.tensor.shape {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name, src.shape, e.tensor.shape
                )));
            }
            e.tensor = src.clone();
        }
        Ok(())
    }
}

/// Weight parametrization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Unit-variance storage scaled at runtime by `gain * lr_mul / sqrt(fan_in)`.
    Equalized { lr_mul: f64, gain: f64 },
    /// He-style storage with standard deviation `gain / sqrt(fan_in)`.
    Standard { gain: f64 },
}

impl Init {
    fn storage_std(self, fan_in: usize) -> f64 {
        match self {
            Init::Equalized { lr_mul, .. } => 1.0 / lr_mul,
            Init::Standard { gain } => gain / (fan_in as f64).sqrt(),
        }
    }

    fn runtime_gain(self, fan_in: usize) -> (f64, f64) {
        match self {
            Init::Equalized { lr_mul, gain } => (gain * lr_mul / (fan_in as f64).sqrt(), lr_mul),
            Init::Standard { .. } => (1.0, 1.0),
        }
    }
}

fn gained<T: Real>(g: &mut Graph<T>, v: Var, gain: f64) -> Var {
    if gain == 1.0 {
        v
    } else {
        g.scale(v, T::of(gain))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    w_gain: f64,
    b_gain: f64,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias_init: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let (w_gain, b_gain) = init.runtime_gain(in_dim);
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[out_dim, in_dim], init.storage_std(in_dim), rng));
        let bias = store.add(format!("{name}.bias"), Tensor::full(&[out_dim], T::of(bias_init / b_gain)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            w_gain,
            b_gain,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Var {
        let w = g.param(store, self.weight, trainable);
        let w = gained(g, w, self.w_gain);
        let b = g.param(store, self.bias, trainable);
        let b = gained(g, b, self.b_gain);
        let y = g.matmul_nt(x, w);
        g.add_row_bias(y, b)
    }

    /// Stores weights so that the effective map is `scale * I` with zero bias.
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>, scale: f64) {
        assert_eq!(self.in_dim, self.out_dim, "identity needs a square layer");
        let n = self.in_dim;
        let w = store.get_mut(self.weight);
        for i in 0..n {
            for j in 0..n {
                w.data[i * n + j] = if i == j { T::of(scale / self.w_gain) } else { T::zero() };
            }
        }
        store.get_mut(self.bias).data.iter_mut().for_each(|b| *b = T::zero());
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    w_gain: f64,
    b_gain: f64,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let (w_gain, b_gain) = init.runtime_gain(fan_in);
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], init.storage_std(fan_in), rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            spec: ConvSpec { stride, pad: k / 2 },
            w_gain,
            b_gain,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Var {
        let w = g.param(store, self.weight, trainable);
        let w = gained(g, w, self.w_gain);
        let y = g.conv2d(x, w, self.spec);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b, trainable);
                let b = gained(g, b, self.b_gain);
                g.add_channel_bias(y, b)
            }
            None => y,
        }
    }
}

/// Adaptive moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, betas: (f64, f64)) -> Self {
        let zeros = |s: &ParamStore<T>| s.ids().map(|id| Tensor::zeros(&s.get(id).shape)).collect::<Vec<_>>();
        Self {
            lr: T::of(lr),
            beta1: T::of(betas.0),
            beta2: T::of(betas.1),
            eps: T::of(1e-8),
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    /// Applies one update. A zero learning rate leaves the parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.t += 1;
        if self.lr == T::zero() {
            return;
        }
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(*id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (T::one() - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (T::one() - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
