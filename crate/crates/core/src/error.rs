//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input outside an operation's mathematical domain (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input too close to a singularity (e.g. normalizing a zero row).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration or parameters.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary container.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("attack error: {0}")]
    Attack(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
