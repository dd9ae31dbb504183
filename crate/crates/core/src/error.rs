use thiserror::Error;

/// Errors raised by the exploration workbench.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// An operation was invoked on an object in the wrong state.
    #[error("invalid state: {0}")]
    State(String),
    /// A computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn state(msg: impl Into<String>) -> Error {
    Error::State(msg.into())
}
