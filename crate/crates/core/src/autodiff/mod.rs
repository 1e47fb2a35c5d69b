//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Supports gradients of gradients, which the gradient-penalty critic loss
//! needs: call [`backward`] or [`grad`] with `create_graph = true` and the
//! returned tensors stay attached to the graph.

mod array;
mod conv;
mod params;
mod tensor;

pub use array::Array;
pub use conv::{conv_out_len, conv_transpose_out_len, ConvGeom};
pub use params::{BoundParams, CheckpointHeader, ParameterStore, RmsProp, StepSummary, CHECKPOINT_VERSION};
pub use tensor::{backward, grad, is_grad_enabled, no_grad, Gradients, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite gradient produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: u64 },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
