//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value object violates its structural invariants (duplicate index,
    /// out-of-range index, mismatched dimensions).
    #[error("structural error: {0}")]
    Structural(String),

    /// An operation was called with an out-of-range parameter.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The input is degenerate for the requested computation (e.g. a zero
    /// vector where a ratio is needed).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Non-finite values appeared where finite ones are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A binary file does not match its documented layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A run configuration violates a declared constraint.
    #[error("invalid config: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
