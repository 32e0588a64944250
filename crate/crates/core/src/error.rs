use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Malformed or inconsistent user-supplied data.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A function evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("non-finite loss at iteration {iteration} (video {video})")]
    NonFiniteLoss { iteration: usize, video: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// File content could not be decoded.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 1 for bad input, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Io { .. } | Error::Format { .. } => 1,
            Error::Shape(_) | Error::Eval(_) | Error::NonFiniteLoss { .. } => 2,
        }
    }
}
