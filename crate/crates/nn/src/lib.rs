//! Small reverse-mode autodiff engine with the layer vocabulary used by the
//! tamper detectors and Siamese encoders.

mod checkpoint;
mod gemm;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{attention_with_probs, bce, contrastive, BatchStats, Graph, Var, PROB_CLAMP};
pub use layers::{
    positional_encoding, Activation, ForwardCtx, LayerFlops, LayerSpec, Network,
};
pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    /// Prefixes the failing location with a layer label.
    pub(crate) fn in_layer(self, label: &str) -> Self {
        match self {
            NnError::NonFinite(op) => NnError::NonFinite(format!("layer {label} ({op})")),
            NnError::Shape(m) => NnError::Shape(format!("layer {label}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Errors with the parameter's name if any gradient entry is NaN or infinite.
pub fn check_grads_finite(store: &ParamStore, grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
    for (id, g) in grads {
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient(store.get(*id).name.clone()));
        }
    }
    Ok(())
}
