//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Graphs are built once with [`GraphBuilder`], then evaluated against a set
//! of named bindings. Trainable bindings ("parameters") receive gradients from
//! [`Graph::gradients`]. Optimizers operate on name-keyed parameter maps.

mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{
    Bindings, Gradients, Graph, GraphBuilder, Node, NodeId, NormBatchStats, Op, Values, L2_NORMALIZE_EPS, NORM_EPS,
};
pub use optim::{
    adam_step, cosine_decay, sgd_step, AdamState, Optimizer, OptimizerConfig, ParamMap, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("name `{0}` declared twice")]
    DuplicateName(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteResult(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("step {step} outside schedule of {total_steps} steps")]
    StepOutOfRange { step: u64, total_steps: u64 },
}
