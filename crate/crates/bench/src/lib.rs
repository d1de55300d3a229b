//! Shapes benchmark: procedural scenes, an oracle classifier, edit suites,
//! metrics and the benchmark harness.

pub mod bench;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod ppm;
pub mod scene;
pub mod suite;
pub mod tasks;
pub mod train;

pub use error::{BenchError, Result};
