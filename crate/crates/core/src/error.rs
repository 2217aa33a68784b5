use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (bad index, non-finite value,
    /// shape mismatch, vector off the simplex).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// The finite-difference oracle produced a non-finite value.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed input file. `line` is 1-based, counting the header.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("serialization error: {0}")]
    Serde(String),

    /// Training hit a non-finite loss; `report` holds the epochs completed before it.
    #[error("training diverged: {message}")]
    Diverged {
        message: String,
        report: Box<crate::trainer::RunReport>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
