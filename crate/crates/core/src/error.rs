use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of the operation (empty matrix, bad target, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation contract (shape mismatch, non-normalized weights, ...).
    #[error("contract violated: {0}")]
    Contract(String),

    /// A graph file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
