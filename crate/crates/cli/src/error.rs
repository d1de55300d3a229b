//! Mapping from failures to process exit codes.

use std::fmt;

use lore_bench::BenchError;
use lore_core::CoreError;
use lore_tensor::TensorError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Bad flags, missing inputs or an invalid config.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check that ran to completion but found values out of tolerance.
#[derive(Debug)]
pub struct Numerical(pub String);

impl fmt::Display for Numerical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn tensor_kind(e: &TensorError) -> Option<i32> {
    match e {
        TensorError::NonFinite { .. } => Some(EXIT_NUMERICAL),
        TensorError::Io(_) | TensorError::Blob(_) => Some(EXIT_IO),
        _ => None,
    }
}

fn core_kind(e: &CoreError) -> Option<i32> {
    match e {
        _ if e.is_numerical() => Some(EXIT_NUMERICAL),
        CoreError::Tensor(t) => tensor_kind(t),
        CoreError::Io(_) | CoreError::Checkpoint(_) => Some(EXIT_IO),
        _ => None,
    }
}

fn bench_kind(e: &BenchError) -> Option<i32> {
    match e {
        _ if e.is_numerical() => Some(EXIT_NUMERICAL),
        BenchError::Core(c) => core_kind(c),
        BenchError::Tensor(t) => tensor_kind(t),
        BenchError::Io(_) | BenchError::Image(_) | BenchError::OracleFile(_) | BenchError::Task(_) => Some(EXIT_IO),
        _ => None,
    }
}

/// Exit code for an error: 2 for numerical failures, 3 for unreadable or
/// unwritable artifacts, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let kind = if cause.is::<Numerical>() {
            Some(EXIT_NUMERICAL)
        } else if cause.is::<Usage>() {
            Some(EXIT_USAGE)
        } else if let Some(e) = cause.downcast_ref::<BenchError>() {
            bench_kind(e)
        } else if let Some(e) = cause.downcast_ref::<CoreError>() {
            core_kind(e)
        } else if let Some(e) = cause.downcast_ref::<TensorError>() {
            tensor_kind(e)
        } else if cause.is::<std::io::Error>() {
            Some(EXIT_IO)
        } else {
            None
        };
        if let Some(k) = kind {
            return k;
        }
    }
    EXIT_USAGE
}
