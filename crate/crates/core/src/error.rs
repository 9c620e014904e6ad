use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An eigengap that must be strictly positive is not.
    #[error("degenerate eigengap: {0}")]
    DegenerateGap(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("eigensolver did not converge: {0}")]
    NoConvergence(String),

    #[error("transport failure on machine {machine}: {reason}")]
    Transport { machine: usize, reason: String },

    #[error("protocol error from machine {machine}: {reason}")]
    Protocol { machine: usize, reason: String },

    #[error("decode error at byte offset {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn gap(msg: impl Into<String>) -> Self {
        Error::DegenerateGap(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
