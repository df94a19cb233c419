use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error in {op}: non-finite value")]
    Numeric { op: String },

    #[error("state error: {0}")]
    State(String),

    #[error("determinism error: {0}")]
    Determinism(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn numeric(op: impl Into<String>) -> Self {
        Error::Numeric { op: op.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
