//! Error taxonomy shared across the crate.
//!
//! Five kinds cover everything callers need to branch on: shape problems,
//! violated preconditions, malformed files, numeric blow-ups, and plain I/O.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible (element-wise ops, conv channel counts, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented precondition was violated (empty batch, non-positive
    /// temperature, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A serialized artifact is malformed. `offset` is the byte position at
    /// which parsing gave up.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A computation produced non-finite values or diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, message: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
