use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate batch: no anchor has both a positive and a negative")]
    DegenerateBatch,

    #[error("batch-sample weighting requires an rng state")]
    MissingRng,

    #[error("dataset has {found} identities, need at least {needed}")]
    TooFewIdentities { found: usize, needed: usize },

    #[error("every batch of epoch {0} was skipped")]
    AllBatchesSkipped(usize),

    #[error("protocol mismatch: {0}")]
    Protocol(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("corrupt file at byte offset {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
