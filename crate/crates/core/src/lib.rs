//! Rectified-flow toy model, attention probing and latent-optimisation editing.

pub mod config;
pub mod edit;
pub mod error;
pub mod flow;
pub mod model;
pub mod params;
pub mod probe;
pub mod prompt;

pub use config::ModelConfig;
pub use error::{CoreError, Result};
pub use params::ModelParams;
pub use prompt::PromptSeq;
