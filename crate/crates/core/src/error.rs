//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration, flag value, or domain precondition.
    #[error("config error: {0}")]
    Config(String),

    /// Scene text or manifest parse failure with a 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Binary format decode failure with the byte offset of the defect.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Tensor or model shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value detected during a numeric pass.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to.
    /// 2 = usage/config, 3 = i/o or corrupt data, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Shape(_) => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::NonFinite(_) => 4,
        }
    }
}
