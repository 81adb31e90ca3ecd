use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("internal invariant violated: {0}")]
    InternalInvariantViolation(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    /// True for errors caused by the caller's input rather than a bug.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::InternalInvariantViolation(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
