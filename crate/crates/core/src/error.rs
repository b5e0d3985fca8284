use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("training diverged at epoch {epoch}, drop {drop}: {reason}")]
    Diverged {
        epoch: usize,
        drop: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
