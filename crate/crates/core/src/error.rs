use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum GfnError {
    #[error("{what} has {count} entries, above the enumeration cap of {cap}")]
    CapExceeded {
        what: &'static str,
        count: usize,
        cap: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state {0} is not terminating")]
    NotTerminating(usize),
    #[error("invalid edge {from} -> {to}")]
    InvalidEdge { from: usize, to: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("reward must be positive, got {0}")]
    NonPositiveReward(f64),
    #[error("undefined: {0}")]
    Undefined(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GfnError>;

pub(crate) fn invalid(msg: impl Into<String>) -> GfnError {
    GfnError::InvalidArgument(msg.into())
}
