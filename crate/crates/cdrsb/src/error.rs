//! Error type shared across the crate. Each variant class maps to a distinct
//! process exit code so shell scripts can tell usage errors from data errors.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("train error: {0}")]
    Train(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Stable nonzero exit code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Parse { .. } => 4,
            Error::Data(_) => 5,
            Error::Train(_) => 6,
            Error::Checkpoint(_) => 7,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
