//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that should compose do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is outside its domain. Carries the field name.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A training step produced a non-finite quantity.
    #[error("training error: {0}")]
    Training(String),

    /// Numerical integration left the finite domain.
    #[error("integration produced a non-finite state at step {step}")]
    Integration { step: usize },

    /// Malformed input data. Carries the 1-based line number when known.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// A pipeline stage was invoked out of order.
    #[error("staging error: {0}")]
    Staging(String),

    /// A metric could not be evaluated (e.g. every pair degenerate).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
