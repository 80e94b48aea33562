use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape, argument or configuration precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An operation produced NaN or infinite values.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A checkpoint or file did not match the expected layout.
    #[error("schema error: {0}")]
    Schema(String),
    /// Input data was missing or unreadable.
    #[error("data error at {path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
