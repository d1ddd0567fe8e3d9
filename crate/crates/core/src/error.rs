use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. `is_user_error` separates bad input (exit 1 at the
/// CLI) from internal failures such as numeric divergence (exit 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("example {example_id} references missing passage id {passage_id}")]
    DanglingGoldPassage { example_id: usize, passage_id: usize },

    #[error("duplicate passage id {0}")]
    DuplicatePassageId(usize),

    #[error("embedding dim must be >= 2, got {0}")]
    DimTooSmall(usize),

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("empty {0} not allowed here")]
    EmptyTokens(&'static str),

    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("duplicate candidate passage id {0}")]
    DuplicateCandidate(usize),

    #[error("candidate sets are not aligned: {0}")]
    MisalignedCandidates(String),

    #[error("distribution supports differ: {0}")]
    SupportMismatch(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at round {round}, epoch {epoch}; last good checkpoint: {last_checkpoint}")]
    Diverged {
        round: usize,
        epoch: usize,
        last_checkpoint: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user input (files, flags, config values).
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
