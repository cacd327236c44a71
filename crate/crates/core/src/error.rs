use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BottError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BottError {
    /// An input violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("malformed data in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BottError {
    pub fn domain(msg: impl Into<String>) -> Self {
        BottError::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BottError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            BottError::Data { .. }
                | BottError::Json(_)
                | BottError::Io { .. }
                | BottError::Checkpoint(_)
                | BottError::Domain(_)
                | BottError::NonFinite(_)
        )
    }
}
