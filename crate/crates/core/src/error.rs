use std::path::PathBuf;

use thiserror::Error;

/// Failure while reading one dataset line.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {cause}")]
pub struct ParseError {
    pub line: usize,
    pub cause: String,
}

impl ParseError {
    pub fn new(line: usize, cause: impl Into<String>) -> Self {
        Self {
            line,
            cause: cause.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate sentence id `{0}` in split")]
    DuplicateId(String),

    #[error("sentence `{id}`: {message}")]
    Supervision { id: String, message: String },

    #[error("query error: {0}")]
    Query(String),

    #[error("sentence `{id}`: combined input length {len} exceeds max_len {max_len}")]
    Overlength { id: String, len: usize, max_len: usize },

    #[error("token id {id} outside table of {size} rows")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("non-finite activation in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation: {0}")]
    Eval(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
