//! Differentiable dense-array computation substrate: forward evaluation,
//! exact reverse-mode gradients, and an independent finite-difference
//! checker.

mod fd;
mod graph;
mod tensor;

pub use fd::finite_difference_check;
pub use graph::{Bindings, BinKind, ComputationGraph, GradientMap, GraphBuilder, NodeId};
pub use tensor::{pairwise_sum, real, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid tensor shape: {0}")]
    InvalidShape(String),
    #[error("non-finite values in {0}")]
    NonFiniteValue(String),
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("duplicate leaf '{0}'")]
    DuplicateLeaf(String),
    #[error("leaf '{0}' is not bound")]
    UnboundLeaf(String),
    #[error("gradient requires a scalar output, got {shape}")]
    NonScalarOutput { shape: String },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("finite-difference step {step} underflows entries of leaf '{leaf}'")]
    StepUnderflow { leaf: String, step: f64 },
}
