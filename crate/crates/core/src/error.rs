use thiserror::Error;

/// Errors raised by the model, feedback, experiment and analysis layers.
///
/// Transport decoding has its own [`crate::transport::DecodeError`] so that
/// framing failures stay distinguishable on the wire path.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index out of bounds: {what} = {value}, limit {limit}")]
    OutOfBounds {
        what: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
