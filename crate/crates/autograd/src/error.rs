use thiserror::Error;

/// Failures raised by tensor construction, graph operations and gradient checks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: division by exact zero")]
    DivisionByZero { op: &'static str },

    #[error("{0}")]
    Contract(String),

    #[error("objective is non-finite when perturbing parameter {param}, element {index}")]
    NonFiniteObjective { param: usize, index: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;
