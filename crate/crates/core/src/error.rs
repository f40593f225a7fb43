use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (shape, range, emptiness).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A value became non-finite or otherwise unusable.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called in the wrong state, e.g. backward without a forward cache.
    #[error("state error: {0}")]
    State(String),

    #[error("non-finite loss while probing coordinate {coordinate}")]
    Evaluation { coordinate: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("no reference captions for image `{0}`")]
    MissingReference(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn arg(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }

    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
