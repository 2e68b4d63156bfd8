//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value plus whatever the backward rule needs. Nodes are appended
//! in execution order, so reverse iteration is a valid topological order.
//! Parameters enter the tape once per graph (repeated uses share a leaf), which
//! is what makes Siamese weight sharing a non-event: both branches read the
//! same leaf and their gradients accumulate there.
//!
//! Every op validates its output; a NaN or infinity aborts the step with the
//! name of the offending op.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::gemm::{gemm, matmul, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::{NnError, Result, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Clamp applied to probabilities before taking logarithms in the BCE loss.
pub const PROB_CLAMP: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cols: Vec<f64>,
        kernel: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Scale {
        x: Var,
        mask: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Passthrough {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
        time: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        head_dim: usize,
    },
    SliceBatch {
        x: Var,
        start: usize,
    },
    PairDistance {
        a: Var,
        b: Var,
    },
    Bce {
        pred: Var,
        labels: Vec<f64>,
    },
    Contrastive {
        dist: Var,
        labels: Vec<f64>,
        margin: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    name: &'static str,
}

/// Batch statistics produced by a training-mode batch norm, for the caller to
/// fold into running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    kink: Option<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
            kink: None,
        }
    }

    /// A graph that never runs backward; ops skip saving backward state.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables hashing of every non-smooth decision (ReLU signs, pooling
    /// winners, loss clamps) so finite-difference probes can detect when a
    /// perturbation crossed a kink.
    pub fn track_kinks(&mut self) {
        self.kink = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kink
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn mix(&mut self, bits: u64) {
        if let Some(h) = self.kink.as_mut() {
            *h ^= bits;
            *h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(NnError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, name });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Leaf)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inner = *xs.last().ok_or_else(|| NnError::Shape("linear on scalar".into()))?;
        if ws.len() != 2 || ws[0] != inner {
            return Err(NnError::Shape(format!("linear: input {:?} vs weight {:?}", xs, ws)));
        }
        let out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(NnError::Shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / inner;
        let mut y = matmul(self.value(x).data(), self.value(w).data(), rows, inner, out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        self.push("linear", Tensor::new(shape, y)?, Op::Linear { x, w, b })
    }

    /// Same-padded stride-1 convolution of `[batch, time, ch_in]` with weights
    /// `[kernel, ch_in, ch_out]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] {
            return Err(NnError::Shape(format!("conv1d: input {:?} vs weight {:?}", xs, ws)));
        }
        let (batch, time, cin) = (xs[0], xs[1], xs[2]);
        let (kernel, cout) = (ws[0], ws[2]);
        if kernel % 2 == 0 {
            return Err(NnError::Shape(format!("conv1d kernel must be odd, got {kernel}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(NnError::Shape(format!("conv1d bias {:?}", self.shape(b))));
            }
        }
        let cols = im2col(self.value(x).data(), batch, time, cin, kernel);
        let rows = batch * time;
        let mut y = matmul(&cols, self.value(w).data(), rows, kernel * cin, cout);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(cout) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let cols = if self.grad_enabled { cols } else { Vec::new() };
        self.push(
            "conv1d",
            Tensor::new(vec![batch, time, cout], y)?,
            Op::Conv1d { x, w, b, cols, kernel },
        )
    }

    /// Non-overlapping max pooling along time; a trailing remainder is dropped.
    pub fn max_pool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || pool == 0 || xs[1] < pool {
            return Err(NnError::Shape(format!("max_pool1d({pool}) on {:?}", xs)));
        }
        let (batch, time, ch) = (xs[0], xs[1], xs[2]);
        let out_t = time / pool;
        let src = self.value(x).data();
        let mut y = vec![0.0; batch * out_t * ch];
        let mut argmax = vec![0usize; y.len()];
        for bi in 0..batch {
            for t in 0..out_t {
                for c in 0..ch {
                    let mut best = (bi * time + t * pool) * ch + c;
                    for p in 1..pool {
                        let idx = (bi * time + t * pool + p) * ch + c;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (bi * out_t + t) * ch + c;
                    y[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        if self.kink.is_some() {
            for &a in &argmax {
                self.mix(a as u64);
            }
        }
        self.push(
            "max_pool1d",
            Tensor::new(vec![batch, out_t, ch], y)?,
            Op::MaxPool { x, argmax },
        )
    }

    /// Per-channel (last axis) normalization with batch statistics, then
    /// `gamma * xhat + beta`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let ch = self.channels_of(x, gamma, beta, "batch_norm")?;
        let data = self.value(x).data();
        let n = data.len() / ch;
        if n < 2 {
            return Err(NnError::Shape("batch_norm needs at least two values per channel".into()));
        }
        let mut mean = vec![0.0; ch];
        for row in data.chunks(ch) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; ch];
        for row in data.chunks(ch) {
            for c in 0..ch {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (n - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = mean.iter().map(|m| -m).collect();
        let out = self.channel_affine(x, gamma, beta, &shift, &inv_std, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch norm with frozen running statistics: a fixed per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let ch = self.channels_of(x, gamma, beta, "batch_norm")?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(NnError::Shape("batch_norm running statistics".into()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = running_mean.iter().map(|m| -m).collect();
        self.channel_affine(x, gamma, beta, &shift, &inv_std, false)
    }

    fn channels_of(&self, x: Var, gamma: Var, beta: Var, what: &str) -> Result<usize> {
        let ch = *self
            .shape(x)
            .last()
            .ok_or_else(|| NnError::Shape(format!("{what} on scalar")))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(NnError::Shape(format!(
                "{what}: {} channels, gamma {:?}, beta {:?}",
                ch,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(ch)
    }

    fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        shift: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let ch = shift.len();
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = src.data().to_vec();
        let mut y = vec![0.0; xhat.len()];
        for (xr, yr) in xhat.chunks_mut(ch).zip(y.chunks_mut(ch)) {
            for c in 0..ch {
                xr[c] = (xr[c] + shift[c]) * inv_std[c];
                yr[c] = g[c] * xr[c] + bt[c];
            }
        }
        let xhat = if self.grad_enabled { xhat } else { Vec::new() };
        self.push(
            "batch_norm",
            Tensor::new(shape, y)?,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
        )
    }

    /// Normalizes each row over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.channels_of(x, gamma, beta, "layer_norm")?;
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = src.data().to_vec();
        let mut y = vec![0.0; xhat.len()];
        let mut inv_std = Vec::with_capacity(xhat.len() / d);
        for (xr, yr) in xhat.chunks_mut(d).zip(y.chunks_mut(d)) {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                xr[c] = (xr[c] - mean) * is;
                yr[c] = g[c] * xr[c] + bt[c];
            }
            inv_std.push(is);
        }
        let xhat = if self.grad_enabled { xhat } else { Vec::new() };
        self.push(
            "layer_norm",
            Tensor::new(shape, y)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let y: Vec<f64> = src.data().iter().map(|v| v.max(0.0)).collect();
        if self.kink.is_some() {
            let bits: Vec<u64> = self.value(x).data().iter().map(|v| (*v > 0.0) as u64).collect();
            for (i, b) in bits.into_iter().enumerate() {
                self.mix(b << 32 | (i as u64 & 0xffff_ffff));
            }
        }
        self.push("relu", Tensor::new(shape, y)?, Op::Relu { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let y = src.data().iter().map(|&v| gelu(v)).collect();
        self.push("gelu", Tensor::new(shape, y)?, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let y = src.data().iter().map(|&v| sigmoid(v)).collect();
        self.push("sigmoid", Tensor::new(shape, y)?, Op::Sigmoid { x })
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let y = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push("dropout", Tensor::new(shape, y)?, Op::Scale { x, mask })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let y = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p + q)
            .collect();
        self.push("add", Tensor::new(shape, y)?, Op::Add { a, b })
    }

    /// Adds a constant tensor shaped like one batch item to every item.
    pub fn add_broadcast_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[1..] != *c.shape() {
            return Err(NnError::Shape(format!("broadcast add {:?} + {:?}", xs, c.shape())));
        }
        let per = c.len();
        let mut y = self.value(x).data().to_vec();
        for chunk in y.chunks_mut(per) {
            for (v, k) in chunk.iter_mut().zip(c.data()) {
                *v += k;
            }
        }
        self.push("add_const", Tensor::new(xs, y)?, Op::Passthrough { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Passthrough { x })
    }

    /// Mean over the time axis of `[batch, time, ch]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(NnError::Shape(format!("global_avg_pool on {:?}", xs)));
        }
        let (batch, time, ch) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut y = vec![0.0; batch * ch];
        for bi in 0..batch {
            let out = &mut y[bi * ch..(bi + 1) * ch];
            for t in 0..time {
                let row = &src[(bi * time + t) * ch..(bi * time + t + 1) * ch];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= time as f64);
        }
        self.push(
            "global_avg_pool",
            Tensor::new(vec![batch, ch], y)?,
            Op::GlobalAvgPool { x, time },
        )
    }

    /// Scaled dot-product attention per head. `q`, `k`, `v` are
    /// `[batch, time, heads * head_dim]` with heads interleaved on the last axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(NnError::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qs,
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(NnError::Shape(format!("attention: width {} not divisible by {heads} heads", qs[2])));
        }
        let head_dim = qs[2] / heads;
        let out = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            qs[0],
            qs[1],
            heads,
            head_dim,
            None,
        );
        self.push(
            "attention",
            Tensor::new(qs, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                head_dim,
            },
        )
    }

    /// Items `start..start + len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start + len > xs[0] {
            return Err(NnError::Shape(format!("slice {start}..{} of {:?}", start + len, xs)));
        }
        let per: usize = xs[1..].iter().product();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut shape = xs;
        shape[0] = len;
        self.push("slice", Tensor::new(shape, data)?, Op::SliceBatch { x, start })
    }

    /// Row-wise Euclidean distance between `[batch, dim]` tensors.
    pub fn pair_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || self.shape(b) != s.as_slice() {
            return Err(NnError::Shape(format!("pair_distance {:?} vs {:?}", s, self.shape(b))));
        }
        let d = euclidean_rows(self.value(a).data(), self.value(b).data(), s[1]);
        if self.kink.is_some() {
            let zeros: Vec<u64> = d.iter().map(|v| (*v == 0.0) as u64).collect();
            zeros.into_iter().for_each(|z| self.mix(z));
        }
        self.push("pair_distance", Tensor::new(vec![s[0]], d)?, Op::PairDistance { a, b })
    }

    /// Mean binary cross-entropy of probabilities against {0, 1} labels.
    pub fn bce_loss(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != labels.len() || p.is_empty() {
            return Err(NnError::Shape(format!("bce: {} predictions, {} labels", p.len(), labels.len())));
        }
        let loss = bce(p, labels);
        if self.kink.is_some() {
            let flags: Vec<u64> = p
                .iter()
                .map(|v| (*v < PROB_CLAMP || *v > 1.0 - PROB_CLAMP) as u64)
                .collect();
            flags.into_iter().for_each(|f| self.mix(f));
        }
        self.push(
            "bce_loss",
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean of `y d^2 + (1 - y) max(0, margin - d)^2`.
    pub fn contrastive_loss(&mut self, dist: Var, labels: &[f64], margin: f64) -> Result<Var> {
        let d = self.value(dist).data();
        if d.len() != labels.len() || d.is_empty() {
            return Err(NnError::Shape(format!("contrastive: {} distances, {} labels", d.len(), labels.len())));
        }
        if margin <= 0.0 {
            return Err(NnError::Config(format!("contrastive margin must be > 0, got {margin}")));
        }
        let loss = contrastive(d, labels, margin)?;
        if self.kink.is_some() {
            let flags: Vec<u64> = d.iter().map(|v| (margin - v > 0.0) as u64).collect();
            flags.into_iter().for_each(|f| self.mix(f));
        }
        self.push(
            "contrastive_loss",
            Tensor::scalar(loss),
            Op::Contrastive {
                dist,
                labels: labels.to_vec(),
                margin,
            },
        )
    }

    /// Reverse sweep from a scalar node. Returns gradients for every parameter
    /// that entered this graph.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<ParamId, Tensor>> {
        if !self.grad_enabled {
            return Err(NnError::Config("backward on an inference graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let leaf_of: HashMap<usize, ParamId> =
            self.param_vars.iter().map(|(p, v)| (v.0, *p)).collect();
        let mut out = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = leaf_of.get(&i) {
                        out.insert(*pid, Tensor::new(node.value.shape().to_vec(), gy)?);
                    }
                }
                op => self.backward_op(op, &node.value, &gy, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn backward_op(
        &self,
        op: &Op,
        y: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (inner, out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / inner;
                let gx = accum(grads, *x, xv.len());
                gemm(
                    1.0,
                    MatRef::row_major(gy, rows, out),
                    MatRef::row_major(wv.data(), inner, out).t(),
                    1.0,
                    MatMut::row_major(gx, rows, inner),
                );
                let gw = accum(grads, *w, inner * out);
                gemm(
                    1.0,
                    MatRef::row_major(xv.data(), rows, inner).t(),
                    MatRef::row_major(gy, rows, out),
                    1.0,
                    MatMut::row_major(gw, inner, out),
                );
                if let Some(b) = b {
                    let gb = accum(grads, *b, out);
                    for row in gy.chunks(out) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                cols,
                kernel,
            } => {
                let xs = self.shape(*x);
                let (batch, time, cin) = (xs[0], xs[1], xs[2]);
                let cout = self.shape(*w)[2];
                let rows = batch * time;
                let kc = kernel * cin;
                let gw = accum(grads, *w, kc * cout);
                gemm(
                    1.0,
                    MatRef::row_major(cols, rows, kc).t(),
                    MatRef::row_major(gy, rows, cout),
                    1.0,
                    MatMut::row_major(gw, kc, cout),
                );
                if let Some(b) = b {
                    let gb = accum(grads, *b, cout);
                    for row in gy.chunks(cout) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
                let mut gcols = vec![0.0; rows * kc];
                gemm(
                    1.0,
                    MatRef::row_major(gy, rows, cout),
                    MatRef::row_major(self.value(*w).data(), kc, cout).t(),
                    0.0,
                    MatMut::row_major(&mut gcols, rows, kc),
                );
                let gx = accum(grads, *x, batch * time * cin);
                col2im_add(&gcols, gx, batch, time, cin, *kernel);
            }
            Op::MaxPool { x, argmax } => {
                let n = self.value(*x).len();
                let gx = accum(grads, *x, n);
                for (g, &src) in gy.iter().zip(argmax) {
                    gx[src] += g;
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let ch = inv_std.len();
                let n = xhat.len() / ch;
                let gamma_v = self.value(*gamma).data().to_vec();
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for (gr, xr) in gy.chunks(ch).zip(xhat.chunks(ch)) {
                    for c in 0..ch {
                        sum_g[c] += gr[c];
                        sum_gx[c] += gr[c] * xr[c];
                    }
                }
                add_into(accum(grads, *beta, ch), &sum_g);
                add_into(accum(grads, *gamma, ch), &sum_gx);
                let gx = accum(grads, *x, xhat.len());
                let nf = n as f64;
                for ((gxr, gr), xr) in gx.chunks_mut(ch).zip(gy.chunks(ch)).zip(xhat.chunks(ch)) {
                    for c in 0..ch {
                        let s = gamma_v[c] * inv_std[c];
                        if *batch_stats {
                            gxr[c] += s / nf * (nf * gr[c] - sum_g[c] - xr[c] * sum_gx[c]);
                        } else {
                            gxr[c] += s * gr[c];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let gamma_v = self.value(*gamma).data().to_vec();
                let mut gbeta = vec![0.0; d];
                let mut ggamma = vec![0.0; d];
                for (gr, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        gbeta[c] += gr[c];
                        ggamma[c] += gr[c] * xr[c];
                    }
                }
                add_into(accum(grads, *beta, d), &gbeta);
                add_into(accum(grads, *gamma, d), &ggamma);
                let gx = accum(grads, *x, xhat.len());
                let df = d as f64;
                for (((gxr, gr), xr), is) in gx
                    .chunks_mut(d)
                    .zip(gy.chunks(d))
                    .zip(xhat.chunks(d))
                    .zip(inv_std)
                {
                    let mut sg = 0.0;
                    let mut sgx = 0.0;
                    for c in 0..d {
                        let g = gr[c] * gamma_v[c];
                        sg += g;
                        sgx += g * xr[c];
                    }
                    for c in 0..d {
                        let g = gr[c] * gamma_v[c];
                        gxr[c] += is / df * (df * g - sg - xr[c] * sgx);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = accum(grads, *x, xv.len());
                for ((g, v), d) in gx.iter_mut().zip(xv).zip(gy) {
                    if *v > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let gx = accum(grads, *x, xv.len());
                for ((g, &v), d) in gx.iter_mut().zip(xv).zip(gy) {
                    *g += d * gelu_grad(v);
                }
            }
            Op::Sigmoid { x } => {
                let n = y.len();
                let gx = accum(grads, *x, n);
                for ((g, s), d) in gx.iter_mut().zip(y.data()).zip(gy) {
                    *g += d * s * (1.0 - s);
                }
            }
            Op::Scale { x, mask } => {
                let gx = accum(grads, *x, mask.len());
                for ((g, m), d) in gx.iter_mut().zip(mask).zip(gy) {
                    *g += d * m;
                }
            }
            Op::Add { a, b } => {
                add_into(accum(grads, *a, gy.len()), gy);
                add_into(accum(grads, *b, gy.len()), gy);
            }
            Op::Passthrough { x } => {
                add_into(accum(grads, *x, gy.len()), gy);
            }
            Op::GlobalAvgPool { x, time } => {
                let xs = self.shape(*x);
                let (batch, ch) = (xs[0], xs[2]);
                let gx = accum(grads, *x, batch * time * ch);
                let inv = 1.0 / *time as f64;
                for bi in 0..batch {
                    let g = &gy[bi * ch..(bi + 1) * ch];
                    for t in 0..*time {
                        let row = &mut gx[(bi * time + t) * ch..(bi * time + t + 1) * ch];
                        for (r, v) in row.iter_mut().zip(g) {
                            *r += v * inv;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                head_dim,
            } => {
                let qs = self.shape(*q);
                let (batch, time) = (qs[0], qs[1]);
                let n = self.value(*q).len();
                let (mut gq, mut gk, mut gv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    gy,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                    batch,
                    time,
                    *heads,
                    *head_dim,
                );
                add_into(accum(grads, *q, n), &gq);
                add_into(accum(grads, *k, n), &gk);
                add_into(accum(grads, *v, n), &gv);
            }
            Op::SliceBatch { x, start } => {
                let n = self.value(*x).len();
                let per: usize = self.shape(*x)[1..].iter().product();
                let gx = accum(grads, *x, n);
                let off = start * per;
                add_into(&mut gx[off..off + gy.len()], gy);
            }
            Op::PairDistance { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let dim = self.shape(*a)[1];
                let mut ga = vec![0.0; av.len()];
                for (i, (&d, &g)) in y.data().iter().zip(gy).enumerate() {
                    if d > 0.0 {
                        for j in 0..dim {
                            ga[i * dim + j] = g * (av[i * dim + j] - bv[i * dim + j]) / d;
                        }
                    }
                }
                add_into(accum(grads, *a, ga.len()), &ga);
                let gb = accum(grads, *b, ga.len());
                for (t, s) in gb.iter_mut().zip(&ga) {
                    *t -= s;
                }
            }
            Op::Bce { pred, labels } => {
                let p = self.value(*pred).data();
                let nf = p.len() as f64;
                let gp = accum(grads, *pred, p.len());
                for ((g, &pv), &l) in gp.iter_mut().zip(p).zip(labels) {
                    if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv) {
                        *g += gy[0] * (-l / pv + (1.0 - l) / (1.0 - pv)) / nf;
                    }
                }
            }
            Op::Contrastive {
                dist,
                labels,
                margin,
            } => {
                let d = self.value(*dist).data();
                let nf = d.len() as f64;
                let gd = accum(grads, *dist, d.len());
                for ((g, &dv), &l) in gd.iter_mut().zip(d).zip(labels) {
                    let hinge = (margin - dv).max(0.0);
                    *g += gy[0] * (2.0 * l * dv - 2.0 * (1.0 - l) * hinge) / nf;
                }
            }
        }
        Ok(())
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// libm tanh goes through expm1 and dominated GELU-heavy profiles.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + fast_tanh(GELU_C * (v + GELU_A * v * v * v)))
}

fn gelu_grad(v: f64) -> f64 {
    let t = fast_tanh(GELU_C * (v + GELU_A * v * v * v));
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn bce(pred: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / pred.len() as f64
}

/// Mean contrastive loss; `labels` are 1 for same identity, 0 otherwise.
pub fn contrastive(dist: &[f64], labels: &[f64], margin: f64) -> Result<f64> {
    let mut total = 0.0;
    for (&d, &y) in dist.iter().zip(labels) {
        if d < 0.0 {
            return Err(NnError::Config(format!("negative distance {d}")));
        }
        let hinge = (margin - d).max(0.0);
        total += y * d * d + (1.0 - y) * hinge * hinge;
    }
    Ok(total / dist.len() as f64)
}

pub(crate) fn euclidean_rows(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    a.chunks(dim)
        .zip(b.chunks(dim))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn im2col(x: &[f64], batch: usize, time: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let kc = kernel * cin;
    let mut cols = vec![0.0; batch * time * kc];
    for b in 0..batch {
        for t in 0..time {
            let row = &mut cols[(b * time + t) * kc..(b * time + t + 1) * kc];
            for k in 0..kernel {
                let src_t = t as isize + k as isize - pad as isize;
                if src_t < 0 || src_t >= time as isize {
                    continue;
                }
                let src = (b * time + src_t as usize) * cin;
                row[k * cin..(k + 1) * cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
    cols
}

fn col2im_add(gcols: &[f64], gx: &mut [f64], batch: usize, time: usize, cin: usize, kernel: usize) {
    let pad = kernel / 2;
    let kc = kernel * cin;
    for b in 0..batch {
        for t in 0..time {
            let row = &gcols[(b * time + t) * kc..(b * time + t + 1) * kc];
            for k in 0..kernel {
                let src_t = t as isize + k as isize - pad as isize;
                if src_t < 0 || src_t >= time as isize {
                    continue;
                }
                let dst = (b * time + src_t as usize) * cin;
                add_into(&mut gx[dst..dst + cin], &row[k * cin..(k + 1) * cin]);
            }
        }
    }
}

fn head_view(data: &[f64], b: usize, h: usize, time: usize, width: usize, head_dim: usize) -> MatRef<'_> {
    MatRef {
        data,
        offset: b * time * width + h * head_dim,
        rows: time,
        cols: head_dim,
        rs: width as isize,
        cs: 1,
    }
}

fn head_view_mut(data: &mut [f64], b: usize, h: usize, time: usize, width: usize, head_dim: usize) -> MatMut<'_> {
    MatMut {
        data,
        offset: b * time * width + h * head_dim,
        rows: time,
        cols: head_dim,
        rs: width as isize,
        cs: 1,
    }
}

fn softmax_rows(s: &mut [f64], n: usize) {
    for row in s.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Attention probabilities for batch item `b`, head `h`: `softmax(Q K^T / sqrt(d))`.
fn attention_probs(q: &[f64], k: &[f64], b: usize, h: usize, time: usize, heads: usize, head_dim: usize) -> Vec<f64> {
    let width = heads * head_dim;
    let mut s = vec![0.0; time * time];
    let scale = 1.0 / (head_dim as f64).sqrt();
    gemm(
        scale,
        head_view(q, b, h, time, width, head_dim),
        head_view(k, b, h, time, width, head_dim).t(),
        0.0,
        MatMut::row_major(&mut s, time, time),
    );
    softmax_rows(&mut s, time);
    s
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    time: usize,
    heads: usize,
    head_dim: usize,
    mut probs_out: Option<&mut Vec<Vec<f64>>>,
) -> Vec<f64> {
    let width = heads * head_dim;
    let mut out = vec![0.0; batch * time * width];
    for b in 0..batch {
        for h in 0..heads {
            let p = attention_probs(q, k, b, h, time, heads, head_dim);
            gemm(
                1.0,
                MatRef::row_major(&p, time, time),
                head_view(v, b, h, time, width, head_dim),
                0.0,
                head_view_mut(&mut out, b, h, time, width, head_dim),
            );
            if let Some(store) = probs_out.as_deref_mut() {
                store.push(p);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    gout: &[f64],
    gq: &mut [f64],
    gk: &mut [f64],
    gv: &mut [f64],
    batch: usize,
    time: usize,
    heads: usize,
    head_dim: usize,
) {
    let width = heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dp = vec![0.0; time * time];
    for b in 0..batch {
        for h in 0..heads {
            // Probabilities are recomputed rather than stored: T^2 per head
            // per item would dominate memory for long sequences.
            let p = attention_probs(q, k, b, h, time, heads, head_dim);
            let go = head_view(gout, b, h, time, width, head_dim);
            gemm(
                1.0,
                MatRef::row_major(&p, time, time).t(),
                go,
                1.0,
                head_view_mut(gv, b, h, time, width, head_dim),
            );
            gemm(
                1.0,
                go,
                head_view(v, b, h, time, width, head_dim).t(),
                0.0,
                MatMut::row_major(&mut dp, time, time),
            );
            for (dr, pr) in dp.chunks_mut(time).zip(p.chunks(time)) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            gemm(
                scale,
                MatRef::row_major(&dp, time, time),
                head_view(k, b, h, time, width, head_dim),
                1.0,
                head_view_mut(gq, b, h, time, width, head_dim),
            );
            gemm(
                scale,
                MatRef::row_major(&dp, time, time).t(),
                head_view(q, b, h, time, width, head_dim),
                1.0,
                head_view_mut(gk, b, h, time, width, head_dim),
            );
        }
    }
}

/// Attention output together with each head's probability matrix, for
/// inspection outside the tape. `probs[b * heads + h]` is `time x time`.
pub fn attention_with_probs(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || v.shape() != s || heads == 0 || s[2] % heads != 0 {
        return Err(NnError::Shape(format!("attention_with_probs {:?}", s)));
    }
    let mut probs = Vec::new();
    let out = attention_forward(
        q.data(),
        k.data(),
        v.data(),
        s[0],
        s[1],
        heads,
        s[2] / heads,
        Some(&mut probs),
    );
    Ok((Tensor::new(s.to_vec(), out)?, probs))
}
