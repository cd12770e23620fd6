use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An op was fed operands whose shapes do not compose. Both shapes are
    /// kept so the message can name them.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// Produced only when finiteness checks are enabled on the tape.
    #[error("{op}: non-finite value in output (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {msg}")]
    Diverged { step: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
