//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! The tape is rebuilt every training step; autoregressive unrolling is just
//! a loop that keeps appending nodes. Parameter tensors live outside the
//! graph and are bound as leaves when a step begins.

mod check;
mod graph;
mod tensor;

pub use check::{
    central_difference, evaluate, finite_diff_check, gradients, relative_error, FiniteDiffReport, GraphFn,
    ParamCheck, FD_STEP,
};
pub use graph::{Graph, Gradients, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}
