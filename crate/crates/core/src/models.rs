//! The seven detectors and two Siamese encoders, assembled from layer specs.
//!
//! Each kind is an [`Architecture`] in a name-keyed registry. Builders work
//! from [`Dims`], the scaled geometry derived from a [`ModelConfig`], so a
//! desk-scale model is the same wiring with shorter time and thinner widths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use tamperlab_nn::{
    Activation, ForwardCtx, GradCheckOptions, GradCheckReport, Graph, LayerFlops, LayerSpec, Network, ParamStore, Tensor, Var,
};

use crate::data::WINDOW;
use crate::dsp::N_SCALES;
use crate::{invalid, CoreError, Result};

pub const EMBEDDING_DIM: usize = 128;
pub const MIN_TIME: usize = 64;
pub const MIN_WIDTH: usize = 8;
pub const DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "resnet")]
    ResNet,
    #[serde(rename = "tran-deep-ffn")]
    TranDeepFfn,
    #[serde(rename = "tran-cnn-ffn")]
    TranCnnFfn,
    #[serde(rename = "feat-cnn-tran")]
    FeatCnnTran,
    #[serde(rename = "feat-cnn-tran-cnn")]
    FeatCnnTranCnn,
    #[serde(rename = "cwt-feat-cnn-tran")]
    CwtFeatCnnTran,
    #[serde(rename = "siamese-tran")]
    SiameseTran,
    #[serde(rename = "siamese-feat-cnn-tran")]
    SiameseFeatCnnTran,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// Filtered, normalized samples, one channel.
    Raw1d,
    /// Morlet scalogram magnitudes.
    Cwt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Cnn,
        ModelKind::ResNet,
        ModelKind::TranDeepFfn,
        ModelKind::TranCnnFfn,
        ModelKind::FeatCnnTran,
        ModelKind::FeatCnnTranCnn,
        ModelKind::CwtFeatCnnTran,
        ModelKind::SiameseTran,
        ModelKind::SiameseFeatCnnTran,
    ];

    pub fn architecture(self) -> &'static dyn Architecture {
        REGISTRY.iter().find(|a| a.kind() == self).copied().expect("every kind is registered")
    }

    pub fn cli_name(self) -> &'static str {
        self.architecture().name()
    }

    pub fn title(self) -> &'static str {
        self.architecture().title()
    }

    pub fn input_kind(self) -> InputKind {
        self.architecture().input_kind()
    }

    pub fn is_siamese(self) -> bool {
        matches!(self, ModelKind::SiameseTran | ModelKind::SiameseFeatCnnTran)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for ModelKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        lookup(s).map(|a| a.kind()).ok_or_else(|| {
            let names: Vec<&str> = REGISTRY.iter().map(|a| a.name()).collect();
            CoreError::Invalid(format!("unknown model '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// How the attention head size responds to scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadDim {
    /// 48 per head, scaled with the widths.
    #[default]
    Literal,
    /// `d_model / heads`.
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub scale: f64,
    pub seed: u64,
    /// After each convolutional block.
    pub conv_dropout: f64,
    /// Inside transformer blocks.
    pub attn_dropout: f64,
    pub head_dim: HeadDim,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            seed: 0,
            conv_dropout: 0.3,
            attn_dropout: 0.1,
            head_dim: HeadDim::Literal,
        }
    }
}

impl ModelConfig {
    pub fn scaled(scale: f64, seed: u64) -> Self {
        Self {
            scale,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().map(|_| ())
    }

    pub fn dims(&self) -> Result<Dims> {
        let s = self.scale;
        if !(s > 0.0 && s <= 1.0) {
            return invalid(format!("model scale must lie in (0, 1], got {s}"));
        }
        for (name, p) in [("conv_dropout", self.conv_dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return invalid(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        let time = (WINDOW as f64 * s).round() as usize;
        if time < MIN_TIME {
            return invalid(format!(
                "scale {s} gives {time} time steps, below the minimum of {MIN_TIME}"
            ));
        }
        Ok(Dims {
            scale: s,
            time,
            conv_dropout: self.conv_dropout,
            attn_dropout: self.attn_dropout,
            head_dim: self.head_dim,
        })
    }
}

/// Scaled geometry shared by all builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub scale: f64,
    pub time: usize,
    pub conv_dropout: f64,
    pub attn_dropout: f64,
    pub head_dim: HeadDim,
}

impl Dims {
    /// Scaled channel count: even, at least `MIN_WIDTH`.
    pub fn w(&self, full: usize) -> usize {
        let half = (full as f64 * self.scale / 2.0).round() as usize;
        (2 * half).max(MIN_WIDTH)
    }

    /// Scalogram bins fed to CWT models; also their model width.
    pub fn cwt_bins(&self) -> usize {
        self.w(N_SCALES)
    }

    pub fn head_dim(&self, heads: usize, d_model: usize) -> usize {
        match self.head_dim {
            HeadDim::Literal => ((48.0 * self.scale).round() as usize).max(MIN_WIDTH),
            HeadDim::Conventional => (d_model / heads).max(1),
        }
    }

    pub fn input_shape(&self, kind: InputKind) -> Vec<usize> {
        match kind {
            InputKind::Raw1d => vec![self.time, 1],
            InputKind::Cwt => vec![self.time, self.cwt_bins()],
        }
    }
}

pub trait Architecture: Sync {
    fn kind(&self) -> ModelKind;
    /// Registry key and CLI spelling.
    fn name(&self) -> &'static str;
    fn title(&self) -> &'static str;
    fn input_kind(&self) -> InputKind;
    fn layers(&self, d: &Dims) -> Vec<LayerSpec>;
}

pub fn registry() -> &'static [&'static dyn Architecture] {
    REGISTRY
}

pub fn lookup(name: &str) -> Option<&'static dyn Architecture> {
    let key = name.trim().to_ascii_lowercase();
    REGISTRY
        .iter()
        .copied()
        .find(|a| a.name() == key || a.title().eq_ignore_ascii_case(&key))
}

static REGISTRY: &[&dyn Architecture] = &[
    &Cnn,
    &ResNet,
    &Transformer {
        kind: ModelKind::TranDeepFfn,
        name: "tran-deep-ffn",
        title: "TranDeepFFN",
        ffn: Ffn::Deep,
        heads: 8,
        head: Head::Detector,
    },
    &Transformer {
        kind: ModelKind::TranCnnFfn,
        name: "tran-cnn-ffn",
        title: "TranCNNFFN",
        ffn: Ffn::Conv,
        heads: 8,
        head: Head::Detector,
    },
    &FeatTransformer {
        kind: ModelKind::FeatCnnTran,
        name: "feat-cnn-tran",
        title: "FeatCNNTran",
        input: InputKind::Raw1d,
        first_kernel: 13,
        ffn: Ffn::Deep,
        heads: 8,
        head: Head::Detector,
    },
    &FeatTransformer {
        kind: ModelKind::FeatCnnTranCnn,
        name: "feat-cnn-tran-cnn",
        title: "FeatCNNTranCNN",
        input: InputKind::Raw1d,
        first_kernel: 7,
        ffn: Ffn::Conv,
        heads: 8,
        head: Head::Detector,
    },
    &FeatTransformer {
        kind: ModelKind::CwtFeatCnnTran,
        name: "cwt-feat-cnn-tran",
        title: "CWTFeatCNNTran",
        input: InputKind::Cwt,
        first_kernel: 7,
        ffn: Ffn::Plain,
        heads: 8,
        head: Head::Detector,
    },
    &Transformer {
        kind: ModelKind::SiameseTran,
        name: "siamese-tran",
        title: "SiameseTran",
        ffn: Ffn::Deep,
        heads: 4,
        head: Head::Embedding,
    },
    &FeatTransformer {
        kind: ModelKind::SiameseFeatCnnTran,
        name: "siamese-feat-cnn-tran",
        title: "SiameseFeatCNNTran",
        input: InputKind::Raw1d,
        first_kernel: 13,
        ffn: Ffn::Deep,
        heads: 4,
        head: Head::Embedding,
    },
];

const ENCODER_BLOCKS: usize = 3;

fn conv_block(filters: usize, kernel: usize, dropout: f64) -> [LayerSpec; 4] {
    [
        LayerSpec::conv(filters, kernel, Activation::Relu),
        LayerSpec::batch_norm(),
        LayerSpec::pool(),
        LayerSpec::dropout(dropout),
    ]
}

fn extractor(d: &Dims, kernels: [usize; 3]) -> Vec<LayerSpec> {
    [64, 128, 256]
        .into_iter()
        .zip(kernels)
        .flat_map(|(f, k)| conv_block(d.w(f), k, d.conv_dropout))
        .collect()
}

#[derive(Clone, Copy)]
enum Ffn {
    /// 4d, 2d (GELU) then d, dropout after each.
    Deep,
    /// Convolutions k7/k5/k3 at widths 64/128/d, each followed by BN and dropout.
    Conv,
    /// Expand to 1024 with GELU, project back to d.
    Plain,
}

fn ffn(kind: Ffn, d: &Dims, model_dim: usize) -> Vec<LayerSpec> {
    let p = d.attn_dropout;
    match kind {
        Ffn::Deep => vec![
            LayerSpec::dense(4 * model_dim, Activation::Gelu),
            LayerSpec::dropout(p),
            LayerSpec::dense(2 * model_dim, Activation::Gelu),
            LayerSpec::dropout(p),
            LayerSpec::dense(model_dim, Activation::Linear),
            LayerSpec::dropout(p),
        ],
        Ffn::Conv => vec![
            LayerSpec::conv(d.w(64), 7, Activation::Relu),
            LayerSpec::batch_norm(),
            LayerSpec::dropout(p),
            LayerSpec::conv(d.w(128), 5, Activation::Relu),
            LayerSpec::batch_norm(),
            LayerSpec::dropout(p),
            LayerSpec::conv_no_bias(model_dim, 3),
            LayerSpec::batch_norm(),
            LayerSpec::dropout(p),
        ],
        Ffn::Plain => vec![
            LayerSpec::dense(d.w(1024), Activation::Gelu),
            LayerSpec::dense(model_dim, Activation::Linear),
        ],
    }
}

/// Pre-norm encoder block: `x + Drop(MHA(LN(x)))`, then `x + FFN(LN(x))`.
fn encoder_block(kind: Ffn, d: &Dims, model_dim: usize, heads: usize) -> [LayerSpec; 2] {
    [
        LayerSpec::Residual {
            body: vec![
                LayerSpec::layer_norm(),
                LayerSpec::MultiHeadAttention {
                    heads,
                    head_dim: d.head_dim(heads, model_dim),
                    model_dim,
                },
                LayerSpec::dropout(d.attn_dropout),
            ],
            shortcut: vec![],
        },
        LayerSpec::Residual {
            body: std::iter::once(LayerSpec::layer_norm()).chain(ffn(kind, d, model_dim)).collect(),
            shortcut: vec![],
        },
    ]
}

#[derive(Clone, Copy)]
enum Head {
    /// GAP, 512, 256, one sigmoid unit.
    Detector,
    /// GAP, 512, 256, then a linear 128-d embedding.
    Embedding,
}

fn head(kind: Head, d: &Dims) -> Vec<LayerSpec> {
    let mut out = vec![
        LayerSpec::GlobalAvgPool,
        LayerSpec::dense(d.w(512), Activation::Relu),
        LayerSpec::dense(d.w(256), Activation::Relu),
    ];
    out.push(match kind {
        Head::Detector => LayerSpec::dense(1, Activation::Sigmoid),
        Head::Embedding => LayerSpec::dense(EMBEDDING_DIM, Activation::Linear),
    });
    out
}

struct Cnn;

impl Architecture for Cnn {
    fn kind(&self) -> ModelKind {
        ModelKind::Cnn
    }
    fn name(&self) -> &'static str {
        "cnn"
    }
    fn title(&self) -> &'static str {
        "CNN"
    }
    fn input_kind(&self) -> InputKind {
        InputKind::Raw1d
    }
    fn layers(&self, d: &Dims) -> Vec<LayerSpec> {
        let mut out = extractor(d, [7, 5, 3]);
        out.extend([
            LayerSpec::Flatten,
            LayerSpec::dense(d.w(128), Activation::Relu),
            LayerSpec::dense(d.w(64), Activation::Relu),
            LayerSpec::dense(1, Activation::Sigmoid),
        ]);
        out
    }
}

struct ResNet;

impl Architecture for ResNet {
    fn kind(&self) -> ModelKind {
        ModelKind::ResNet
    }
    fn name(&self) -> &'static str {
        "resnet"
    }
    fn title(&self) -> &'static str {
        "ResNet"
    }
    fn input_kind(&self) -> InputKind {
        InputKind::Raw1d
    }
    fn layers(&self, d: &Dims) -> Vec<LayerSpec> {
        let stem = d.w(64);
        let mut out = vec![
            LayerSpec::conv_no_bias(stem, 7),
            LayerSpec::batch_norm(),
            LayerSpec::act(Activation::Relu),
        ];
        let mut width = stem;
        for full in [64, 64, 128, 128] {
            let w = d.w(full);
            let shortcut = if w == width {
                vec![]
            } else {
                vec![LayerSpec::conv(w, 1, Activation::Linear)]
            };
            out.push(LayerSpec::Residual {
                body: vec![
                    LayerSpec::conv_no_bias(w, 3),
                    LayerSpec::batch_norm(),
                    LayerSpec::act(Activation::Relu),
                    LayerSpec::conv_no_bias(w, 3),
                    LayerSpec::batch_norm(),
                ],
                shortcut,
            });
            out.push(LayerSpec::act(Activation::Relu));
            width = w;
        }
        out.extend([LayerSpec::GlobalAvgPool, LayerSpec::dense(1, Activation::Sigmoid)]);
        out
    }
}

/// Encoder stack directly on the scalogram.
struct Transformer {
    kind: ModelKind,
    name: &'static str,
    title: &'static str,
    ffn: Ffn,
    heads: usize,
    head: Head,
}

impl Architecture for Transformer {
    fn kind(&self) -> ModelKind {
        self.kind
    }
    fn name(&self) -> &'static str {
        self.name
    }
    fn title(&self) -> &'static str {
        self.title
    }
    fn input_kind(&self) -> InputKind {
        InputKind::Cwt
    }
    fn layers(&self, d: &Dims) -> Vec<LayerSpec> {
        let model_dim = d.cwt_bins();
        let mut out = vec![LayerSpec::PositionalEncoding];
        for _ in 0..ENCODER_BLOCKS {
            out.extend(encoder_block(self.ffn, d, model_dim, self.heads));
        }
        out.extend(head(self.head, d));
        out
    }
}

/// Convolutional extractor, positional encoding, then the encoder stack at
/// the extractor's final width.
struct FeatTransformer {
    kind: ModelKind,
    name: &'static str,
    title: &'static str,
    input: InputKind,
    first_kernel: usize,
    ffn: Ffn,
    heads: usize,
    head: Head,
}

impl Architecture for FeatTransformer {
    fn kind(&self) -> ModelKind {
        self.kind
    }
    fn name(&self) -> &'static str {
        self.name
    }
    fn title(&self) -> &'static str {
        self.title
    }
    fn input_kind(&self) -> InputKind {
        self.input
    }
    fn layers(&self, d: &Dims) -> Vec<LayerSpec> {
        let model_dim = d.w(256);
        let mut out = extractor(d, [self.first_kernel, 5, 3]);
        out.push(LayerSpec::PositionalEncoding);
        for _ in 0..ENCODER_BLOCKS {
            out.extend(encoder_block(self.ffn, d, model_dim, self.heads));
        }
        out.extend(head(self.head, d));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub model: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerFlops>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub convention: String,
}

pub const FLOPS_CONVENTION: &str = "1 MAC = 2 FLOPs; normalization, activation, pooling, positional encoding and residual additions count 1 FLOP per element; dropout and reshapes are free; Siamese figures are per branch";

/// An assembled network together with its parameters.
pub struct Model {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    pub dims: Dims,
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn build(kind: ModelKind, cfg: &ModelConfig) -> Result<Self> {
        let dims = cfg.dims()?;
        let arch = kind.architecture();
        let specs = arch.layers(&dims);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let input = dims.input_shape(arch.input_kind());
        let net = Network::build(&specs, &input, &mut store, &mut rng, arch.name())?;
        let expect = if kind.is_siamese() { vec![EMBEDDING_DIM] } else { vec![1] };
        if net.output_shape() != expect.as_slice() {
            return invalid(format!(
                "{} produces {:?}, expected {:?}",
                arch.title(),
                net.output_shape(),
                expect
            ));
        }
        Ok(Self {
            kind,
            cfg: cfg.clone(),
            dims,
            net,
            store,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        self.net.input_shape()
    }

    pub fn describe(&self) -> String {
        self.net.describe()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        Ok(self.net.forward(&self.store, g, x, ctx)?)
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 3 || s[1..] != *self.input_shape() {
            return invalid(format!(
                "{} expects input [batch, {}, {}], got {:?}",
                self.kind.title(),
                self.input_shape()[0],
                self.input_shape()[1],
                s
            ));
        }
        Ok(s[0])
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut g = Graph::inference();
        let xv = g.input(x.clone())?;
        let y = self.forward(&mut g, xv, &mut ForwardCtx::eval())?;
        Ok(g.value(y).clone())
    }

    /// Tamper probabilities for a `[batch, time, channels]` input.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        if self.kind.is_siamese() {
            return invalid(format!("{} is an encoder; use embed", self.kind.title()));
        }
        Ok(self.infer(x)?.into_data())
    }

    /// `[batch, 128]` embeddings.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        if !self.kind.is_siamese() {
            return invalid(format!("{} is a detector; use predict", self.kind.title()));
        }
        self.infer(x)
    }

    /// Euclidean distances between paired rows of two inputs, both passed
    /// through the one shared encoder.
    pub fn distances(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
        let n = self.check_batch(a)?;
        if self.check_batch(b)? != n {
            return invalid("pair inputs differ in batch size");
        }
        let ea = self.embed(a)?;
        let eb = self.embed(b)?;
        Ok(ea
            .data()
            .chunks(EMBEDDING_DIM)
            .zip(eb.data().chunks(EMBEDDING_DIM))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .collect())
    }

    /// Same identity iff the distance is below `threshold`.
    pub fn verify(&self, a: &Tensor, b: &Tensor, threshold: f64) -> Result<Vec<(bool, f64)>> {
        if !(threshold > 0.0) {
            return invalid(format!("verification threshold must be > 0, got {threshold}"));
        }
        Ok(self
            .distances(a, b)?
            .into_iter()
            .map(|d| (d < threshold, d))
            .collect())
    }

    pub fn flops(&self) -> FlopsReport {
        let layers = self.net.flops();
        FlopsReport {
            model: self.kind.title().to_string(),
            input_shape: self.input_shape().to_vec(),
            total_macs: layers.iter().map(|l| l.macs).sum(),
            total_flops: layers.iter().map(LayerFlops::flops).sum(),
            layers,
            convention: FLOPS_CONVENTION.to_string(),
        }
    }
}

/// Cost report for `kind` built at `cfg`.
pub fn flops(kind: ModelKind, cfg: &ModelConfig) -> Result<FlopsReport> {
    Ok(Model::build(kind, cfg)?.flops())
}

/// Compares backpropagated gradients of the training loss with central
/// differences. The loss is BCE on a two-item batch for detectors and the
/// contrastive loss on two pairs for encoders, in training mode with a fixed
/// dropout seed. Inputs are uniform in [0, 1].
pub fn grad_check_model(model: &mut Model, opts: &GradCheckOptions, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = if model.kind.is_siamese() { 4 } else { 2 };
    let mut shape = vec![batch];
    shape.extend_from_slice(model.input_shape());
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let labels = [1.0, 0.0];
    let siamese = model.kind.is_siamese();
    let Model { net, store, .. } = model;
    let net = &*net;
    Ok(tamperlab_nn::grad_check(store, opts, |store, g| {
        let xv = g.input(x.clone())?;
        let mut ctx = ForwardCtx::train(seed);
        let y = net.forward(store, g, xv, &mut ctx)?;
        if siamese {
            let a = g.slice_batch(y, 0, 2)?;
            let b = g.slice_batch(y, 2, 2)?;
            let d = g.pair_distance(a, b)?;
            g.contrastive_loss(d, &labels, 1.0)
        } else {
            g.bce_loss(y, &labels)
        }
    })?)
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    kind: ModelKind,
    config: ModelConfig,
}

/// Checkpoint carrying the kind and config needed to rebuild the model.
pub fn save_model(path: &std::path::Path, model: &Model) -> Result<()> {
    let manifest = serde_json::to_value(ModelManifest {
        kind: model.kind,
        config: model.cfg.clone(),
    })?;
    Ok(tamperlab_nn::save_checkpoint(path, &model.store, &manifest)?)
}

pub fn load_model(path: &std::path::Path) -> Result<Model> {
    let ck = tamperlab_nn::load_checkpoint(path)?;
    let m: ModelManifest = serde_json::from_value(ck.manifest)?;
    let mut model = Model::build(m.kind, &m.config)?;
    model.store.load_from(&ck.params)?;
    Ok(model)
}
