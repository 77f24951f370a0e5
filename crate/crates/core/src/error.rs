use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 3]),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("checkpoint mismatch: stream expects {expected:#04x}, checkpoint hashes to {actual:#04x}")]
    CheckpointMismatch { expected: u8, actual: u8 },

    #[error("stale cross-view context: frame {expected} vs {got}")]
    StaleContext { expected: usize, got: usize },

    #[error("quality ranges of the two curves do not overlap")]
    NoOverlap,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) | Error::Corrupt(_) | Error::Truncated(_) => 2,
            Error::CheckpointMismatch { .. } => 3,
            Error::Numeric(_) | Error::NoOverlap => 4,
            _ => 1,
        }
    }
}
