use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input record. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The same key was supplied twice where duplicates are not allowed.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    /// A precondition on the arguments did not hold.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A remote scorer request failed. `indices` are the input positions of the failed batch.
    #[error("transport error for inputs {indices:?}: {message}")]
    Transport { indices: Vec<usize>, message: String },

    /// A remote scorer answered with something that violates the wire contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// True for failures caused by talking to an external service.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::Protocol(_))
    }
}
