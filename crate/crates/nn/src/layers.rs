//! Declarative layer specs and the network they assemble into.
//!
//! Shapes here are per item: a sequence is `[time, channels]`, a flat vector
//! is `[features]`. The batch axis is implicit and always leading at runtime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{BatchStats, Graph, Var};
use crate::{NnError, ParamId, ParamStore, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Same padding, stride 1. The bias is redundant (and its gradient
    /// identically zero) when batch norm follows directly.
    Conv1d {
        filters: usize,
        kernel: usize,
        activation: Activation,
        #[serde(default = "yes")]
        bias: bool,
    },
    MaxPool1d {
        pool: usize,
    },
    /// `momentum` weights the old running statistic.
    BatchNorm1d {
        momentum: f64,
        epsilon: f64,
    },
    Dropout {
        rate: f64,
    },
    /// Applied along the last axis, so on a sequence it acts per position.
    Dense {
        units: usize,
        activation: Activation,
    },
    LayerNorm {
        epsilon: f64,
    },
    MultiHeadAttention {
        heads: usize,
        head_dim: usize,
        model_dim: usize,
    },
    /// Sinusoidal, added to the input.
    PositionalEncoding,
    GlobalAvgPool,
    Flatten,
    Act {
        activation: Activation,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, activation: Activation) -> Self {
        LayerSpec::Conv1d {
            filters,
            kernel,
            activation,
            bias: true,
        }
    }

    pub fn conv_no_bias(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv1d {
            filters,
            kernel,
            activation: Activation::Linear,
            bias: false,
        }
    }

    pub fn pool() -> Self {
        LayerSpec::MaxPool1d { pool: 2 }
    }

    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm1d {
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }

    pub fn dropout(rate: f64) -> Self {
        LayerSpec::Dropout { rate }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation }
    }

    pub fn layer_norm() -> Self {
        LayerSpec::LayerNorm { epsilon: 1e-6 }
    }

    pub fn act(activation: Activation) -> Self {
        LayerSpec::Act { activation }
    }
}

/// Cost of one layer in a single forward pass of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: String,
    pub macs: u64,
    /// Normalization, activation, pooling and additions, one per element.
    pub elementwise: u64,
}

impl LayerFlops {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

enum Layer {
    Conv {
        w: ParamId,
        b: Option<ParamId>,
        kernel: usize,
        act: Activation,
    },
    Pool {
        pool: usize,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
        momentum: f64,
        eps: f64,
    },
    Dropout {
        rate: f64,
    },
    Dense {
        w: ParamId,
        b: ParamId,
        act: Activation,
    },
    LayerNorm {
        gamma: ParamId,
        beta: ParamId,
        eps: f64,
    },
    /// q, k, v, output projections. Keys carry no bias: it would shift every
    /// score in a softmax row equally.
    Mha {
        proj: [(ParamId, Option<ParamId>); 4],
        heads: usize,
        head_dim: usize,
    },
    PosEnc {
        table: Tensor,
    },
    Gap,
    Flatten,
    Act(Activation),
    Residual {
        body: Vec<Built>,
        shortcut: Vec<Built>,
    },
}

struct Built {
    layer: Layer,
    label: String,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    momentum: f64,
    stats: BatchStats,
}

/// Per-pass state: train/inference mode, the dropout generator, and batch
/// statistics waiting to be folded into running averages.
pub struct ForwardCtx {
    train: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Folds the collected batch statistics into the running buffers.
    pub fn apply_updates(&mut self, store: &mut ParamStore) {
        for u in self.bn_updates.drain(..) {
            let m = u.momentum;
            for (r, b) in store.value_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in store.value_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding(time: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 || d_model == 0 {
        return Err(NnError::Config(format!("positional encoding needs even d_model, got {d_model}")));
    }
    let mut data = vec![0.0; time * d_model];
    for t in 0..time {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[t * d_model + 2 * i] = angle.sin();
            data[t * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![time, d_model], data)
}

fn act_suffix(a: Activation) -> &'static str {
    match a {
        Activation::Sigmoid => "(sigmoid)",
        Activation::Gelu => "(gelu)",
        Activation::Linear | Activation::Relu => "",
    }
}

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::Linear => "linear",
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
        Activation::Sigmoid => "sigmoid",
    }
}

fn apply_act(g: &mut Graph, x: Var, a: Activation) -> Result<Var> {
    match a {
        Activation::Linear => Ok(x),
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

fn build_layer<R: Rng>(
    spec: &LayerSpec,
    input: &[usize],
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
) -> Result<Built> {
    let shape_err = |what: &str| NnError::Shape(format!("{name}: {what} cannot take input {:?}", input));
    let (layer, label, out) = match spec {
        LayerSpec::Conv1d {
            filters,
            kernel,
            activation,
            bias,
        } => {
            if input.len() != 2 {
                return Err(shape_err("conv1d"));
            }
            if kernel % 2 == 0 || *filters == 0 {
                return Err(NnError::Config(format!("{name}: conv kernel {kernel} must be odd")));
            }
            let cin = input[1];
            let w = store.add_fan_in_uniform(format!("{name}.w"), &[*kernel, cin, *filters], kernel * cin, rng);
            let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[*filters]), true));
            (
                Layer::Conv {
                    w,
                    b,
                    kernel: *kernel,
                    act: *activation,
                },
                format!("Conv({filters},k{kernel}){}", act_suffix(*activation)),
                vec![input[0], *filters],
            )
        }
        LayerSpec::MaxPool1d { pool } => {
            if input.len() != 2 || *pool == 0 || input[0] < *pool {
                return Err(shape_err("max pool"));
            }
            (Layer::Pool { pool: *pool }, "Pool".to_string(), vec![input[0] / pool, input[1]])
        }
        LayerSpec::BatchNorm1d { momentum, epsilon } => {
            let ch = *input.last().ok_or_else(|| shape_err("batch norm"))?;
            let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[ch], 1.0), true);
            let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[ch]), true);
            let mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[ch]), false);
            let var = store.add(format!("{name}.running_var"), Tensor::full(&[ch], 1.0), false);
            (
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    momentum: *momentum,
                    eps: *epsilon,
                },
                "BN".to_string(),
                input.to_vec(),
            )
        }
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(NnError::Config(format!("{name}: dropout rate {rate}")));
            }
            (Layer::Dropout { rate: *rate }, "Drop".to_string(), input.to_vec())
        }
        LayerSpec::Dense { units, activation } => {
            let inner = *input.last().ok_or_else(|| shape_err("dense"))?;
            let w = store.add_fan_in_uniform(format!("{name}.w"), &[inner, *units], inner, rng);
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[*units]), true);
            let mut out = input.to_vec();
            *out.last_mut().unwrap() = *units;
            (
                Layer::Dense {
                    w,
                    b,
                    act: *activation,
                },
                format!("Dense{units}{}", act_suffix(*activation)),
                out,
            )
        }
        LayerSpec::LayerNorm { epsilon } => {
            let d = *input.last().ok_or_else(|| shape_err("layer norm"))?;
            let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0), true);
            let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]), true);
            (
                Layer::LayerNorm {
                    gamma,
                    beta,
                    eps: *epsilon,
                },
                "LN".to_string(),
                input.to_vec(),
            )
        }
        LayerSpec::MultiHeadAttention {
            heads,
            head_dim,
            model_dim,
        } => {
            if input.len() != 2 || input[1] != *model_dim {
                return Err(shape_err(&format!("attention with model_dim {model_dim}")));
            }
            if *heads == 0 || *head_dim == 0 {
                return Err(NnError::Config(format!("{name}: heads and head_dim must be positive")));
            }
            let inner = heads * head_dim;
            let mut proj = Vec::with_capacity(4);
            for (tag, rows, cols) in [
                ("q", *model_dim, inner),
                ("k", *model_dim, inner),
                ("v", *model_dim, inner),
                ("o", inner, *model_dim),
            ] {
                let w = store.add_fan_in_uniform(format!("{name}.w{tag}"), &[rows, cols], rows, rng);
                let b = (tag != "k").then(|| store.add(format!("{name}.b{tag}"), Tensor::zeros(&[cols]), true));
                proj.push((w, b));
            }
            (
                Layer::Mha {
                    proj: [proj[0], proj[1], proj[2], proj[3]],
                    heads: *heads,
                    head_dim: *head_dim,
                },
                format!("MHA({heads}x{head_dim})"),
                input.to_vec(),
            )
        }
        LayerSpec::PositionalEncoding => {
            if input.len() != 2 {
                return Err(shape_err("positional encoding"));
            }
            let table = positional_encoding(input[0], input[1]).map_err(|e| e.in_layer(name))?;
            (Layer::PosEnc { table }, "PE".to_string(), input.to_vec())
        }
        LayerSpec::GlobalAvgPool => {
            if input.len() != 2 || input[0] == 0 {
                return Err(shape_err("global average pool"));
            }
            (Layer::Gap, "GAP".to_string(), vec![input[1]])
        }
        LayerSpec::Flatten => (Layer::Flatten, "Flatten".to_string(), vec![input.iter().product()]),
        LayerSpec::Act { activation } => (
            Layer::Act(*activation),
            format!("Act({})", act_name(*activation)),
            input.to_vec(),
        ),
        LayerSpec::Residual { body, shortcut } => {
            let body = build_stack(body, input, store, rng, &format!("{name}.body"))?;
            let shortcut = build_stack(shortcut, input, store, rng, &format!("{name}.shortcut"))?;
            let b_out = body.last().map_or(input.to_vec(), |b| b.out_shape.clone());
            let s_out = shortcut.last().map_or(input.to_vec(), |b| b.out_shape.clone());
            if b_out != s_out {
                return Err(NnError::Shape(format!(
                    "{name}: residual body gives {:?}, shortcut gives {:?}",
                    b_out, s_out
                )));
            }
            let mut label = format!("Res[{}", join_labels(&body));
            if !shortcut.is_empty() {
                label.push('|');
                label.push_str(&join_labels(&shortcut));
            }
            label.push(']');
            (Layer::Residual { body, shortcut }, label, b_out)
        }
    };
    if out.iter().any(|&d| d == 0) {
        return Err(NnError::Shape(format!("{name}: empty output shape {:?}", out)));
    }
    Ok(Built {
        layer,
        label,
        in_shape: input.to_vec(),
        out_shape: out,
    })
}

fn build_stack<R: Rng>(
    specs: &[LayerSpec],
    input: &[usize],
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
) -> Result<Vec<Built>> {
    let mut shape = input.to_vec();
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let b = build_layer(spec, &shape, store, rng, &format!("{prefix}.{i}"))?;
        shape = b.out_shape.clone();
        out.push(b);
    }
    Ok(out)
}

fn join_labels(layers: &[Built]) -> String {
    layers.iter().map(|b| b.label.as_str()).collect::<Vec<_>>().join("→")
}

fn forward_layer(
    b: &Built,
    store: &ParamStore,
    g: &mut Graph,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let r = match &b.layer {
        Layer::Conv { w, b: bias, act, .. } => {
            let wv = g.param(store, *w)?;
            let bv = bias.map(|b| g.param(store, b)).transpose()?;
            let y = g.conv1d_same(x, wv, bv)?;
            apply_act(g, y, *act)
        }
        Layer::Pool { pool } => g.max_pool1d(x, *pool),
        Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            momentum,
            eps,
        } => {
            let gv = g.param(store, *gamma)?;
            let bv = g.param(store, *beta)?;
            if ctx.train {
                let (y, stats) = g.batch_norm_train(x, gv, bv, *eps)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: *mean,
                    var: *var,
                    momentum: *momentum,
                    stats,
                });
                Ok(y)
            } else {
                g.batch_norm_eval(
                    x,
                    gv,
                    bv,
                    store.value(*mean).data(),
                    store.value(*var).data(),
                    *eps,
                )
            }
        }
        Layer::Dropout { rate } => {
            if ctx.train {
                g.dropout(x, *rate, &mut ctx.rng)
            } else {
                Ok(x)
            }
        }
        Layer::Dense { w, b: bias, act } => {
            let wv = g.param(store, *w)?;
            let bv = g.param(store, *bias)?;
            let y = g.linear(x, wv, Some(bv))?;
            apply_act(g, y, *act)
        }
        Layer::LayerNorm { gamma, beta, eps } => {
            let gv = g.param(store, *gamma)?;
            let bv = g.param(store, *beta)?;
            g.layer_norm(x, gv, bv, *eps)
        }
        Layer::Mha { proj, heads, .. } => {
            let mut qkv = [x; 3];
            for (slot, (w, bias)) in qkv.iter_mut().zip(&proj[..3]) {
                let wv = g.param(store, *w)?;
                let bv = bias.map(|b| g.param(store, b)).transpose()?;
                *slot = g.linear(x, wv, bv)?;
            }
            let att = g.attention(qkv[0], qkv[1], qkv[2], *heads)?;
            let wo = g.param(store, proj[3].0)?;
            let bo = proj[3].1.map(|b| g.param(store, b)).transpose()?;
            g.linear(att, wo, bo)
        }
        Layer::PosEnc { table } => g.add_broadcast_const(x, table),
        Layer::Gap => g.global_avg_pool(x),
        Layer::Flatten => {
            let batch = g.shape(x)[0];
            g.reshape(x, &[batch, b.out_shape[0]])
        }
        Layer::Act(a) => apply_act(g, x, *a),
        Layer::Residual { body, shortcut } => {
            let mut h = x;
            for l in body {
                h = forward_layer(l, store, g, h, ctx)?;
            }
            let mut s = x;
            for l in shortcut {
                s = forward_layer(l, store, g, s, ctx)?;
            }
            g.add(h, s)
        }
    };
    r.map_err(|e| e.in_layer(&b.label))
}

fn layer_flops(b: &Built, out: &mut Vec<LayerFlops>) {
    let n_out = numel(&b.out_shape);
    let n_in = numel(&b.in_shape);
    let act_cost = |a: Activation| if a == Activation::Linear { 0 } else { n_out };
    let (macs, elementwise) = match &b.layer {
        Layer::Conv { act, kernel, .. } => {
            (n_out * *kernel as u64 * b.in_shape[1] as u64, act_cost(*act))
        }
        Layer::Pool { .. } => (0, n_in),
        Layer::BatchNorm { .. } | Layer::LayerNorm { .. } | Layer::PosEnc { .. } => (0, n_in),
        Layer::Dropout { .. } | Layer::Flatten => (0, 0),
        Layer::Dense { act, .. } => {
            let inner = *b.in_shape.last().unwrap() as u64;
            (n_out * inner, act_cost(*act))
        }
        Layer::Mha { heads, head_dim, .. } => {
            let t = b.in_shape[0] as u64;
            let d = b.in_shape[1] as u64;
            let inner = (*heads * *head_dim) as u64;
            let proj = 3 * t * d * inner + t * inner * d;
            let scores = 2 * t * t * *head_dim as u64 * *heads as u64;
            (proj + scores, t * t * *heads as u64)
        }
        Layer::Gap => (0, n_in),
        Layer::Act(a) => (0, act_cost(*a)),
        Layer::Residual { body, shortcut } => {
            for l in body.iter().chain(shortcut) {
                layer_flops(l, out);
            }
            (0, n_out)
        }
    };
    let label = if matches!(b.layer, Layer::Residual { .. }) {
        "ResidualAdd".to_string()
    } else {
        b.label.clone()
    };
    out.push(LayerFlops {
        layer: label,
        macs,
        elementwise,
    });
}

/// A sequential stack of layers wired against a fixed per-item input shape.
pub struct Network {
    layers: Vec<Built>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl Network {
    /// Builds the stack, registering parameters under `prefix`. Shape
    /// mismatches are reported here rather than at the first forward pass.
    pub fn build<R: Rng>(
        specs: &[LayerSpec],
        input_shape: &[usize],
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::Shape(format!("invalid input shape {:?}", input_shape)));
        }
        let layers = build_stack(specs, input_shape, store, rng, prefix)?;
        let output_shape = layers
            .last()
            .map_or(input_shape.to_vec(), |b| b.out_shape.clone());
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            output_shape,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    /// Layer labels joined by arrows, e.g. `Conv(64,k7)→BN→Pool`.
    pub fn describe(&self) -> String {
        join_labels(&self.layers)
    }

    pub fn layer_labels(&self) -> Vec<String> {
        self.layers.iter().map(|b| b.label.clone()).collect()
    }

    /// `x` must be `[batch, ..input_shape]`.
    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!(
                "network expects [batch, {:?}], got {:?}",
                self.input_shape, s
            )));
        }
        let mut h = x;
        for b in &self.layers {
            h = forward_layer(b, store, g, h, ctx)?;
        }
        Ok(h)
    }

    /// Per-layer cost of one item's forward pass; residual children are
    /// listed before their add.
    pub fn flops(&self) -> Vec<LayerFlops> {
        let mut out = Vec::new();
        for b in &self.layers {
            layer_flops(b, &mut out);
        }
        out
    }
}
