//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Everything that can go wrong in the core library, grouped by cause so
/// callers (in particular the CLI) can map categories to exit codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shapes of operands disagree, or an index is out of range.
    Dim(String),
    /// A configuration value violates its documented constraints.
    Config(String),
    /// An operation was called in a state that forbids it.
    State(String),
    /// Task data is malformed (bad token id, bad label).
    Data(String),
    /// A numeric run produced non-finite values.
    Numeric(String),
    /// A verification oracle reported a mismatch.
    Oracle(String),
    /// A serialized payload is malformed or truncated.
    Format(String),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn oracle(msg: impl Into<String>) -> Self {
        Error::Oracle(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Oracle(m) => write!(f, "oracle error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
