use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape already consumed by backward; reset it before reuse")]
    TapeConsumed,
    #[error("variable refers to a tape generation that has been reset")]
    StaleVar,
    #[error("{0}")]
    Invalid(String),
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("malformed tensor blob: {0}")]
    Blob(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TensorError::Invalid(msg.into())
    }
}
