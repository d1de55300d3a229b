//! Dense `f32` tensors, a reverse-mode autodiff tape, a reproducible RNG and
//! the `LORT` binary tensor format.

mod blob;
mod element;
mod error;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use blob::{blob_from_bytes, blob_to_bytes, read_blob, write_blob, BLOB_MAGIC, BLOB_VERSION};
pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_at, op_cases, OpCase};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
