use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed fvecs/ivecs data.
    #[error("format error in record {record} at byte {offset}: {reason}")]
    VecsFormat {
        record: usize,
        offset: u64,
        reason: String,
    },

    /// Malformed index file.
    #[error("index file error at byte {offset}: {reason}")]
    IndexFormat { offset: u64, reason: String },

    /// An internal consistency check failed.
    #[error("invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
