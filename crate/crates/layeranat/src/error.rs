//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("corpus too short: {tokens} tokens, need more than block size {block_size}")]
    CorpusTooShort { tokens: usize, block_size: usize },

    #[error("empty eval set")]
    EmptyEvalSet,

    #[error("checkpoint error at {location}: {message}")]
    Checkpoint { location: String, message: String },

    #[error("eval-set hash mismatch: {left} vs {right}")]
    EvalHashMismatch { left: String, right: String },

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
