use std::io;

use thiserror::Error;

/// Every failure the engine can report. Variants map one-to-one onto the
/// error classes the CLI turns into exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("binding error: slot `{slot}`: {reason}")]
    Binding { slot: String, reason: String },

    #[error("alignment error: input {height}x{width} requires multiple of {divisor}")]
    Alignment {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("truncation error: {0}")]
    Truncation(String),

    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported operator `{0}`")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}

pub(crate) use ensure;
