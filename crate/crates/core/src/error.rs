use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// One or more configuration invariants are violated.
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// An operation was invoked outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A dataset cannot satisfy a sampling request.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Malformed dataset or checkpoint file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Training produced a non-finite value.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code used by the CLI: 2 config/usage, 3 data/format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Dimension(_) => 2,
            Error::Dataset(_) | Error::Format { .. } | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
            Error::Internal(_) => 1,
        }
    }
}
