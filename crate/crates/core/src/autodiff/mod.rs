//! Dense-tensor reverse-mode differentiation with differentiable gradients.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_report, FiniteDiffReport};
pub use graph::{GradWrt, GradientMap, Graph, NodeId, OpKind};
pub use tensor::{bce, matmul, numel, sigmoid, Tensor, PROB_CLAMP};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("differentiation root must hold one value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op} takes {expected} inputs, got {got}")]
    Arity { op: String, expected: usize, got: usize },
    #[error("finite-difference step must lie in (0, 1e-2], got {0}")]
    InvalidStep(f64),
    #[error("function is not finite when perturbing parameter {param} element {element}")]
    NonFiniteProbe { param: usize, element: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
