use lore_core::CoreError;
use lore_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid suite request: {0}")]
    Suite(String),
    #[error("malformed image: {0}")]
    Image(String),
    #[error("malformed task record: {0}")]
    Task(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("malformed oracle file: {0}")]
    OracleFile(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    pub fn is_numerical(&self) -> bool {
        match self {
            BenchError::Core(e) => e.is_numerical(),
            BenchError::Tensor(TensorError::NonFinite { .. }) => true,
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, BenchError::Io(_)) || matches!(self, BenchError::Core(CoreError::Io(_)))
    }
}
