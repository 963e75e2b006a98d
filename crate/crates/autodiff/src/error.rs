use thiserror::Error;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite forward value at node {node} ({op})")]
    NonFiniteValue { node: usize, op: &'static str },
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
}
