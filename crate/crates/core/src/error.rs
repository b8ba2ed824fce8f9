use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MohdError>;

#[derive(Debug, Error)]
pub enum MohdError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("tape error: {0}")]
    Tape(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("trace format error: {0}")]
    Trace(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },
}

impl MohdError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MohdError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MohdError::Io {
            path: path.into(),
            source,
        }
    }
}
