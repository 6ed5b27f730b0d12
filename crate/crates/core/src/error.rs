use std::io;

use thiserror::Error;

/// Errors raised by the model, loss and evaluation code.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration does not admit the requested computation
    /// (channel/group mismatch, non-divisible spatial sizes, oversized windows).
    #[error("configuration error: {0}")]
    Config(String),
    /// An input violates an operation's precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// A non-finite or degenerate value showed up mid-computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A serialized container could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Prefixes the message with the name of the feature or layer that failed.
    pub fn context(self, what: &str) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{what}: {m}")),
            Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{what}: {m}")),
            Error::Format(m) => Error::Format(format!("{what}: {m}")),
            Error::Io(e) => Error::Io(io::Error::new(e.kind(), format!("{what}: {e}"))),
        }
    }
}
