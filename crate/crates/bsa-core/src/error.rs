//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the forecasting library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A value lies outside the mathematically valid range.
    #[error("domain error: {0}")]
    Domain(String),
    /// An operation was called on a module in the wrong state.
    #[error("state error: {0}")]
    State(String),
    /// A CSV cell could not be parsed. Row and column are 1-based and count
    /// the header as row 1.
    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },
    /// Training produced a non-finite value and was aborted.
    #[error("numeric abort: {0}")]
    Numeric(String),
    /// Checkpoint serialization or deserialization failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
