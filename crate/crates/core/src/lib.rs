//! Segmented attention with a compressive memory path, plus everything needed
//! to train and probe small decoder models built on it: a reverse-mode tape
//! over flat tensors, a byte-level data pipeline, AdamW with warmup/cosine
//! scheduling, passkey-retrieval evaluation, and balance-gate telemetry.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod seeds;
pub mod telemetry;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tape, Tensor, Var};
