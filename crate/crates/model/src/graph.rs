//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Nodes that cannot reach a gradient-requiring leaf skip all
//! backward work, which keeps frozen networks cheap.

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMulNT(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        spec: ConvSpec,
        cols: Vec<T>,
    },
    LeakyRelu(Var, T),
    Tanh(Var),
    Softplus(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    MinibatchStd {
        x: Var,
        group: usize,
        sd: Vec<T>,
    },
    Modulate {
        x: Var,
        scale: Var,
        bias: Var,
    },
    AddNoise {
        x: Var,
        gain: Var,
        noise: Tensor<T>,
    },
    BroadcastBatch(Var),
    Upsample2x(Var),
    Pool(Var, usize),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    ConcatCols(Vec<Var>),
    Select(Var, usize),
    Stack(Vec<Var>),
    RowNorm(Var),
    NormalizeRows(Var),
    RowDot(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

fn store_key<T>(store: &ParamStore<T>) -> usize {
    store as *const ParamStore<T> as usize
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    /// Keyed by the owning store's address so several models can share a graph.
    params: HashMap<(usize, ParamId), Var>,
}

/// Gradients of one scalar with respect to every node that needs them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<((usize, ParamId), Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients; parameters that did not influence the output get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        let key = store_key(store);
        self.params
            .iter()
            .filter(|((k, _), _)| *k == key)
            .map(|&((_, id), v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&store.get(id).shape));
                (id, g)
            })
            .collect()
    }
}

fn conv_out(size: usize, k: usize, spec: ConvSpec) -> usize {
    assert!(size + 2 * spec.pad >= k, "kernel larger than padded input");
    (size + 2 * spec.pad - k) / spec.stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, spec: ConvSpec, oh: usize, ow: usize, out: &mut [T]) {
    let l = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut out[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(ch * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, spec: ConvSpec, oh: usize, ow: usize, dx: &mut [T]) {
    let l = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ch * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn dims4(t: &Tensor<impl Real>) -> (usize, usize, usize, usize) {
    match t.shape[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => panic!("expected NCHW tensor, got {:?}", t.shape),
    }
}

fn dims2(t: &Tensor<impl Real>) -> (usize, usize) {
    match t.shape[..] {
        [r, c] => (r, c),
        _ => panic!("expected 2-D tensor, got {:?}", t.shape),
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is wanted (e.g. the input of an R1 penalty).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Parameter leaf; one node per parameter and graph. Frozen parameters
    /// (`trainable = false`) behave as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        let key = (store_key(store), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id).clone();
        let v = if trainable { self.input(t) } else { self.constant(t) };
        self.params.insert(key, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "add shape mismatch");
        let t = Tensor::new(x.shape.clone(), x.data.iter().zip(&y.data).map(|(p, q)| *p + *q).collect());
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "sub shape mismatch");
        let t = Tensor::new(x.shape.clone(), x.data.iter().zip(&y.data).map(|(p, q)| *p - *q).collect());
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "mul shape mismatch");
        let t = Tensor::new(x.shape.clone(), x.data.iter().zip(&y.data).map(|(p, q)| *p * *q).collect());
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// `a · bᵀ` for `a`: M x K and `b`: N x K.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.value(a).data,
            (k as isize, 1),
            &self.value(b).data,
            (1, k as isize),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, n) = dims2(self.value(x));
        assert_eq!(self.value(b).len(), n, "row bias length");
        let bias = &self.value(b).data;
        let data = self.value(x).data.iter().enumerate().map(|(i, v)| *v + bias[i % n]).collect();
        let t = Tensor::new(self.value(x).shape.clone(), data);
        self.push(t, Op::AddRowBias(x, b), &[x, b])
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, c, h, w) = dims4(self.value(x));
        assert_eq!(self.value(b).len(), c, "channel bias length");
        let bias = &self.value(b).data;
        let hw = h * w;
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bias[(i / hw) % c])
            .collect();
        let t = Tensor::new(self.value(x).shape.clone(), data);
        self.push(t, Op::AddChannelBias(x, b), &[x, b])
    }

    /// Cross-correlation of NCHW `x` with OCkk `w`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let (n, c, h, wd) = dims4(self.value(x));
        let (o, c2, k, k2) = dims4(self.value(w));
        assert!(c == c2 && k == k2, "conv weight {:?} for input {:?}", self.value(w).shape, self.value(x).shape);
        let (oh, ow) = (conv_out(h, k, spec), conv_out(wd, k, spec));
        let (ckk, l) = (c * k * k, oh * ow);
        let keep = self.nodes[x.0].grad || self.nodes[w.0].grad;
        let mut cols = vec![T::zero(); if keep { n * ckk * l } else { ckk * l }];
        let mut out = vec![T::zero(); n * o * l];
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        for i in 0..n {
            let col = if keep { &mut cols[i * ckk * l..(i + 1) * ckk * l] } else { &mut cols[..] };
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, k, spec, oh, ow, col);
            T::gemm(
                o,
                ckk,
                l,
                T::one(),
                wv,
                (ckk as isize, 1),
                col,
                (l as isize, 1),
                T::zero(),
                &mut out[i * o * l..(i + 1) * o * l],
                (l as isize, 1),
            );
        }
        if !keep {
            cols = Vec::new();
        }
        self.push(Tensor::new(vec![n, o, oh, ow], out), Op::Conv2d { x, w, spec, cols }, &[x, w])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let t = self.value(x).map(|v| if v >= T::zero() { v } else { v * slope });
        self.push(t, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x), &[x])
    }

    /// Per-(sample, channel) normalization over spatial positions.
    /// Appends one channel holding the average across-sample standard
    /// deviation of each group of `group` consecutive samples. The group
    /// shrinks to the largest divisor of the batch size.
    pub fn minibatch_std(&mut self, x: Var, group: usize) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let gs = (1..=group.clamp(1, n)).rev().find(|d| n % d == 0).unwrap_or(1);
        let p = c * h * w;
        let hw = h * w;
        let xv = &self.value(x).data;
        let inv_g = T::one() / T::of(gs as f64);
        let mut sd = vec![T::zero(); (n / gs) * p];
        let mut out = vec![T::zero(); n * (c + 1) * hw];
        for k in 0..n / gs {
            let mut stat = T::zero();
            for j in 0..p {
                let mean = (0..gs).map(|m| xv[(k * gs + m) * p + j]).sum::<T>() * inv_g;
                let var = (0..gs)
                    .map(|m| {
                        let d = xv[(k * gs + m) * p + j] - mean;
                        d * d
                    })
                    .sum::<T>()
                    * inv_g;
                let v = (var + T::of(1e-8)).sqrt();
                sd[k * p + j] = v;
                stat += v;
            }
            stat /= T::of(p as f64);
            for m in 0..gs {
                let i = k * gs + m;
                let dst = &mut out[i * (c + 1) * hw..(i + 1) * (c + 1) * hw];
                dst[..p].copy_from_slice(&xv[i * p..(i + 1) * p]);
                dst[p..].iter_mut().for_each(|o| *o = stat);
            }
        }
        self.push(Tensor::new(vec![n, c + 1, h, w], out), Op::MinibatchStd { x, group: gs, sd }, &[x])
    }

    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let hw = h * w;
        let inv_hw = T::one() / T::of(hw as f64);
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (p, chunk) in xv.chunks(hw).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() * inv_hw;
            let var = chunk.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_hw;
            let r = T::one() / (var + eps).sqrt();
            for (o, v) in out[p * hw..(p + 1) * hw].iter_mut().zip(chunk) {
                *o = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        self.push(Tensor::new(vec![n, c, h, w], out), Op::InstanceNorm { x, inv_std }, &[x])
    }

    /// `x * scale + bias` with per-(sample, channel) `scale`, `bias` of shape N x C.
    pub fn modulate(&mut self, x: Var, scale: Var, bias: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert_eq!(self.value(scale).shape, vec![n, c], "modulation scale shape");
        assert_eq!(self.value(bias).shape, vec![n, c], "modulation bias shape");
        let hw = h * w;
        let (s, b) = (&self.value(scale).data, &self.value(bias).data);
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| *v * s[i / hw] + b[i / hw])
            .collect();
        self.push(Tensor::new(vec![n, c, h, w], data), Op::Modulate { x, scale, bias }, &[x, scale, bias])
    }

    /// `x + gain[c] * noise` with noise of shape (N or 1) x 1 x H x W.
    pub fn add_noise(&mut self, x: Var, gain: Var, noise: Tensor<T>) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let (nn, nc, nh, nw) = dims4(&noise);
        assert!((nn == n || nn == 1) && nc == 1 && nh == h && nw == w, "noise shape {:?}", noise.shape);
        let hw = h * w;
        let g = &self.value(gain).data;
        assert_eq!(g.len(), c);
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (s, ch, p) = (i / (c * hw), (i / hw) % c, i % hw);
                let ni = if nn == 1 { 0 } else { s };
                *v + g[ch] * noise.data[ni * hw + p]
            })
            .collect();
        self.push(Tensor::new(vec![n, c, h, w], data), Op::AddNoise { x, gain, noise }, &[x, gain])
    }

    /// Repeats a tensor along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(&v.shape);
        let data = (0..n).flat_map(|_| v.data.iter().copied()).collect();
        self.push(Tensor::new(shape, data), Op::BroadcastBatch(x), &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out), Op::Upsample2x(x), &[x])
    }

    /// Mean over non-overlapping `f` x `f` blocks.
    pub fn pool(&mut self, x: Var, f: usize) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert!(f >= 1 && h % f == 0 && w % f == 0, "pool factor {f} for {h}x{w}");
        let (oh, ow) = (h / f, w / f);
        let xv = &self.value(x).data;
        let inv = T::one() / T::of((f * f) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / f) * ow + xx / f] += xv[(p * h + y) * w + xx];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::Pool(x, f), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = dims4(self.value(parts[0]));
        let hw = h * w;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = dims4(self.value(p));
            assert!(pn == n && ph == h && pw == w, "concat shape mismatch");
            total += pc;
        }
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape[1];
                out.extend_from_slice(&v.data[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        self.push(Tensor::new(vec![n, total, h, w], out), Op::ConcatChannels(parts.to_vec()), parts)
    }

    /// Flattens every part to N x (rest) and concatenates along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).shape[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = self.value(*p);
                assert_eq!(v.shape[0], n);
                v.len() / n
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for s in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data[s * w..(s + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![n, total], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `i` of every sample of an N x S x D tensor.
    pub fn select(&mut self, x: Var, i: usize) -> Var {
        let v = self.value(x);
        let [n, s, d] = v.shape[..] else {
            panic!("select expects N x S x D")
        };
        assert!(i < s);
        let data = (0..n).flat_map(|j| v.data[(j * s + i) * d..(j * s + i + 1) * d].iter().copied()).collect();
        self.push(Tensor::new(vec![n, d], data), Op::Select(x, i), &[x])
    }

    /// Stacks N x D tensors into N x S x D.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let (n, d) = dims2(self.value(parts[0]));
        let s = parts.len();
        let mut out = vec![T::zero(); n * s * d];
        for (i, p) in parts.iter().enumerate() {
            let v = self.value(*p);
            assert_eq!(dims2(v), (n, d));
            for j in 0..n {
                out[(j * s + i) * d..(j * s + i + 1) * d].copy_from_slice(&v.data[j * d..(j + 1) * d]);
            }
        }
        self.push(Tensor::new(vec![n, s, d], out), Op::Stack(parts.to_vec()), parts)
    }

    pub fn row_norm(&mut self, x: Var) -> Var {
        let (r, d) = dims2(self.value(x));
        let v = &self.value(x).data;
        let data = (0..r)
            .map(|i| v[i * d..(i + 1) * d].iter().map(|a| *a * *a).sum::<T>().sqrt())
            .collect();
        self.push(Tensor::new(vec![r], data), Op::RowNorm(x), &[x])
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (r, d) = dims2(self.value(x));
        let v = &self.value(x).data;
        let mut out = v.clone();
        for i in 0..r {
            let row = &mut out[i * d..(i + 1) * d];
            let norm = row.iter().map(|a| *a * *a).sum::<T>().sqrt();
            // A zero row stays zero and passes no gradient.
            if norm > T::zero() {
                for a in row {
                    *a /= norm;
                }
            }
        }
        self.push(Tensor::new(vec![r, d], out), Op::NormalizeRows(x), &[x])
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (r, d) = dims2(self.value(a));
        assert_eq!(dims2(self.value(b)), (r, d));
        let (x, y) = (&self.value(a).data, &self.value(b).data);
        let data = (0..r)
            .map(|i| (0..d).map(|j| x[i * d + j] * y[i * d + j]).sum())
            .collect();
        self.push(Tensor::new(vec![r], data), Op::RowDot(a, b), &[a, b])
    }

    /// Gradient of the scalar `out` with respect to every node requiring one.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(self.value(out).shape.clone(), vec![T::one()]));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<((usize, ParamId), Var)> = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        params.sort_by_key(|(k, _)| *k);
        Gradients { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&t.data) {
                    *a += *b;
                }
            }
            slot => *slot = Some(t),
        }
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let shape_of = |v: Var| self.value(v).shape.clone();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let y = &self.value(*b).data;
                    let d = g.data.iter().zip(y).map(|(p, q)| *p * *q).collect();
                    self.acc(grads, *a, Tensor::new(shape_of(*a), d));
                }
                if self.wants(*b) {
                    let x = &self.value(*a).data;
                    let d = g.data.iter().zip(x).map(|(p, q)| *p * *q).collect();
                    self.acc(grads, *b, Tensor::new(shape_of(*b), d));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|v| v * s));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let (n, _) = dims2(self.value(*b));
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g.data,
                        (n as isize, 1),
                        &self.value(*b).data,
                        (k as isize, 1),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    self.acc(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        &g.data,
                        (1, n as isize),
                        &self.value(*a).data,
                        (k as isize, 1),
                        T::zero(),
                        &mut db,
                        (k as isize, 1),
                    );
                    self.acc(grads, *b, Tensor::new(vec![n, k], db));
                }
            }
            Op::AddRowBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for (i, v) in g.data.iter().enumerate() {
                        db[i % n] += *v;
                    }
                    self.acc(grads, *b, Tensor::new(shape_of(*b), db));
                }
            }
            Op::AddChannelBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*b) {
                    let (_, c, h, w) = dims4(g);
                    let mut db = vec![T::zero(); c];
                    for (i, v) in g.data.iter().enumerate() {
                        db[(i / (h * w)) % c] += *v;
                    }
                    self.acc(grads, *b, Tensor::new(shape_of(*b), db));
                }
            }
            Op::Conv2d { x, w, spec, cols } => {
                let (n, c, h, wd) = dims4(self.value(*x));
                let (o, _, k, _) = dims4(self.value(*w));
                let (_, _, oh, ow) = dims4(g);
                let (ckk, l) = (c * k * k, oh * ow);
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * ckk];
                    for i in 0..n {
                        T::gemm(
                            o,
                            l,
                            ckk,
                            T::one(),
                            &g.data[i * o * l..(i + 1) * o * l],
                            (l as isize, 1),
                            &cols[i * ckk * l..(i + 1) * ckk * l],
                            (1, l as isize),
                            T::one(),
                            &mut dw,
                            (ckk as isize, 1),
                        );
                    }
                    self.acc(grads, *w, Tensor::new(shape_of(*w), dw));
                }
                if self.wants(*x) {
                    let wv = &self.value(*w).data;
                    let mut dx = vec![T::zero(); n * c * h * wd];
                    let mut dcol = vec![T::zero(); ckk * l];
                    for i in 0..n {
                        T::gemm(
                            ckk,
                            o,
                            l,
                            T::one(),
                            wv,
                            (1, ckk as isize),
                            &g.data[i * o * l..(i + 1) * o * l],
                            (l as isize, 1),
                            T::zero(),
                            &mut dcol,
                            (l as isize, 1),
                        );
                        col2im(&dcol, c, h, wd, k, *spec, oh, ow, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                    self.acc(grads, *x, Tensor::new(shape_of(*x), dx));
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.value(*x).data;
                let d = g
                    .data
                    .iter()
                    .zip(xv)
                    .map(|(gv, v)| if *v >= T::zero() { *gv } else { *gv * *slope })
                    .collect();
                self.acc(grads, *x, Tensor::new(shape_of(*x), d));
            }
            Op::Tanh(x) => {
                let d = g
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(gv, y)| *gv * (T::one() - *y * *y))
                    .collect();
                self.acc(grads, *x, Tensor::new(shape_of(*x), d));
            }
            Op::Softplus(x) => {
                let xv = &self.value(*x).data;
                let d = g.data.iter().zip(xv).map(|(gv, v)| *gv * sigmoid(*v)).collect();
                self.acc(grads, *x, Tensor::new(shape_of(*x), d));
            }
            Op::MinibatchStd { x, group, sd } => {
                let (n, c1, h, w) = dims4(g);
                let (c, hw, gs) = (c1 - 1, h * w, *group);
                let p = c * hw;
                let xv = &self.value(*x).data;
                let inv_g = T::one() / T::of(gs as f64);
                let mut d = vec![T::zero(); n * p];
                for k in 0..n / gs {
                    let total: T = (0..gs)
                        .map(|m| {
                            let i = k * gs + m;
                            g.data[i * c1 * hw + p..(i + 1) * c1 * hw].iter().copied().sum::<T>()
                        })
                        .sum();
                    let coef = total / T::of((gs * p) as f64);
                    for j in 0..p {
                        let mean = (0..gs).map(|m| xv[(k * gs + m) * p + j]).sum::<T>() * inv_g;
                        for m in 0..gs {
                            let i = k * gs + m;
                            d[i * p + j] = g.data[i * c1 * hw + j] + coef * (xv[i * p + j] - mean) / sd[k * p + j];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(shape_of(*x), d));
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = dims4(g);
                let hw = h * w;
                let inv_hw = T::one() / T::of(hw as f64);
                let y = &node.value.data;
                let mut d = vec![T::zero(); g.len()];
                for (p, r) in inv_std.iter().enumerate() {
                    let gs = &g.data[p * hw..(p + 1) * hw];
                    let ys = &y[p * hw..(p + 1) * hw];
                    let mg = gs.iter().copied().sum::<T>() * inv_hw;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| *a * *b).sum::<T>() * inv_hw;
                    for j in 0..hw {
                        d[p * hw + j] = *r * (gs[j] - mg - ys[j] * mgy);
                    }
                }
                self.acc(grads, *x, Tensor::new(shape_of(*x), d));
            }
            Op::Modulate { x, scale, bias } => {
                let (n, c, h, w) = dims4(g);
                let hw = h * w;
                if self.wants(*x) {
                    let s = &self.value(*scale).data;
                    let d = g.data.iter().enumerate().map(|(i, v)| *v * s[i / hw]).collect();
                    self.acc(grads, *x, Tensor::new(shape_of(*x), d));
                }
                if self.wants(*scale) {
                    let xv = &self.value(*x).data;
                    let d = (0..n * c)
                        .map(|p| (0..hw).map(|j| g.data[p * hw + j] * xv[p * hw + j]).sum())
                        .collect();
                    self.acc(grads, *scale, Tensor::new(vec![n, c], d));
                }
                if self.wants(*bias) {
                    let d = (0..n * c).map(|p| g.data[p * hw..(p + 1) * hw].iter().copied().sum()).collect();
                    self.acc(grads, *bias, Tensor::new(vec![n, c], d));
                }
            }
            Op::AddNoise { x, gain, noise } => {
                self.acc(grads, *x, g.clone());
                if self.wants(*gain) {
                    let (n, c, h, w) = dims4(g);
                    let hw = h * w;
                    let nn = noise.shape[0];
                    let mut d = vec![T::zero(); c];
                    for s in 0..n {
                        let ni = if nn == 1 { 0 } else { s };
                        for (ch, dv) in d.iter_mut().enumerate() {
                            let base = (s * c + ch) * hw;
                            for j in 0..hw {
                                *dv += g.data[base + j] * noise.data[ni * hw + j];
                            }
                        }
                    }
                    self.acc(grads, *gain, Tensor::new(shape_of(*gain), d));
                }
            }
            Op::BroadcastBatch(x) => {
                let m = self.value(*x).len();
                let mut d = vec![T::zero(); m];
                for (i, v) in g.data.iter().enumerate() {
                    d[i % m] += *v;
                }
                self.acc(grads, *x, Tensor::new(shape_of(*x), d));
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = dims4(self.value(*x));
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + y / 2) * w + xx / 2] += g.data[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(shape_of(*x), d));
            }
            Op::Pool(x, f) => {
                let (n, c, h, w) = dims4(self.value(*x));
                let (oh, ow) = (h / f, w / f);
                let inv = T::one() / T::of((f * f) as f64);
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(p * h + y) * w + xx] = g.data[(p * oh + y / f) * ow + xx / f] * inv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(shape_of(*x), d));
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(&shape_of(*x), gv));
            }
            Op::Mean(x) => {
                let shape = shape_of(*x);
                let gv = g.item() / T::of(shape.iter().product::<usize>() as f64);
                self.acc(grads, *x, Tensor::full(&shape, gv));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, g.clone().reshape(&shape_of(*x)));
            }
            Op::ConcatChannels(parts) => {
                let (n, total, h, w) = dims4(g);
                let hw = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).shape[1];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let base = (s * total + offset) * hw;
                            d.extend_from_slice(&g.data[base..base + pc * hw]);
                        }
                        self.acc(grads, *p, Tensor::new(shape_of(*p), d));
                    }
                    offset += pc;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = dims2(g);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).len() / n;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(n * w);
                        for s in 0..n {
                            d.extend_from_slice(&g.data[s * total + offset..s * total + offset + w]);
                        }
                        self.acc(grads, *p, Tensor::new(shape_of(*p), d));
                    }
                    offset += w;
                }
            }
            Op::Select(x, i) => {
                let shape = shape_of(*x);
                let (n, s, d) = (shape[0], shape[1], shape[2]);
                let mut out = vec![T::zero(); n * s * d];
                for j in 0..n {
                    out[(j * s + i) * d..(j * s + i + 1) * d].copy_from_slice(&g.data[j * d..(j + 1) * d]);
                }
                self.acc(grads, *x, Tensor::new(shape, out));
            }
            Op::Stack(parts) => {
                let [n, s, d] = g.shape[..] else { unreachable!() };
                for (i, p) in parts.iter().enumerate() {
                    if self.wants(*p) {
                        let out = (0..n)
                            .flat_map(|j| g.data[(j * s + i) * d..(j * s + i + 1) * d].iter().copied())
                            .collect();
                        self.acc(grads, *p, Tensor::new(vec![n, d], out));
                    }
                }
            }
            Op::RowNorm(x) => {
                let (r, d) = dims2(self.value(*x));
                let xv = &self.value(*x).data;
                let mut out = vec![T::zero(); r * d];
                for i in 0..r {
                    let norm = node.value.data[i];
                    if norm > T::zero() {
                        for j in 0..d {
                            out[i * d + j] = g.data[i] * xv[i * d + j] / norm;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![r, d], out));
            }
            Op::NormalizeRows(x) => {
                let (r, d) = dims2(self.value(*x));
                let xv = &self.value(*x).data;
                let y = &node.value.data;
                let mut out = vec![T::zero(); r * d];
                for i in 0..r {
                    let norm = xv[i * d..(i + 1) * d].iter().map(|a| *a * *a).sum::<T>().sqrt();
                    if norm == T::zero() {
                        continue;
                    }
                    let gy: T = (0..d).map(|j| g.data[i * d + j] * y[i * d + j]).sum();
                    for j in 0..d {
                        out[i * d + j] = (g.data[i * d + j] - y[i * d + j] * gy) / norm;
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![r, d], out));
            }
            Op::RowDot(a, b) => {
                let (r, d) = dims2(self.value(*a));
                for (target, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(target) {
                        let ov = &self.value(other).data;
                        let out = (0..r * d).map(|k| g.data[k / d] * ov[k]).collect();
                        self.acc(grads, target, Tensor::new(vec![r, d], out));
                    }
                }
            }
        }
    }
}
