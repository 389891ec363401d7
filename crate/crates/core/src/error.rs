use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("invalid attention mask: row {row} has no connections")]
    InvalidMask { row: usize },

    #[error("{what} index {index} out of range (limit {limit}) at position {position}")]
    Index { what: &'static str, index: usize, limit: usize, position: usize },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence length must be at least 1")]
    EmptySequence,

    #[error("sequence length {len} exceeds the model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus of {got} tokens is too small: need at least {needed}")]
    CorpusTooSmall { needed: usize, got: usize },

    #[error("loss became non-finite at step {step} (lr {lr}); consider enabling gradient clipping")]
    Divergence { step: usize, lr: f64 },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
