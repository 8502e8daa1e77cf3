use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Protocol,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("raster error: {0}")]
    Raster(String),

    /// Malformed on-disk or on-wire payload ("bad magic", "short payload", ...).
    #[error("{0}")]
    Format(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("connection failure: {0}")]
    Connection(String),

    #[error("denoiser timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("denoiser server error: {0}")]
    Server(String),

    /// `last_row` is the formatted trace row of the previous step, if any.
    #[error("non-finite value in clean estimate at t={t}; last trace row: {last_row}")]
    NonFinite { t: usize, last_row: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape(_) | Error::Invalid(_) | Error::Config { .. } => ErrorCategory::Config,
            Error::Io(_) | Error::Raster(_) | Error::Format(_) => ErrorCategory::Io,
            Error::Protocol(_)
            | Error::Connection(_)
            | Error::Timeout(_)
            | Error::Server(_) => ErrorCategory::Protocol,
            Error::NonFinite { .. } => ErrorCategory::Numeric,
        }
    }
}
