//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Shapes that should agree do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A call violated an argument precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// An index (class id, cluster id, ...) is out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// A non-finite value appeared where finite math was required.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// An internal API contract was broken by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A file is not in the expected format.
    #[error("format error: {0}")]
    Format(String),
    /// A file is in the expected format but its content is damaged.
    #[error("corrupt file: {0}")]
    Corruption(String),
    /// A configuration key is unknown, mistyped, or out of range.
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
