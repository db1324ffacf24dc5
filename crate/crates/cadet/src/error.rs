//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("softmax row {row} has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("event ordering violated: {0}")]
    Ordering(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("bucket {bucket} out of range 1..={k}")]
    BucketRange { bucket: usize, k: usize },

    #[error("sequence of {len} tokens exceeds token budget {budget}; chunk it first")]
    SequenceTooLong { len: usize, budget: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for configuration problems the
    /// user can fix on the command line, 2 for runtime aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
