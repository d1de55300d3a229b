use lore_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("schedule mismatch: cache has {cache} steps, sampler uses {sampler}")]
    ScheduleMismatch { cache: usize, sampler: usize },
    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// True for failures caused by NaN/Inf values rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::Numerical { .. } | CoreError::Tensor(TensorError::NonFinite { .. })
        )
    }
}
