use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// A background cell or integration point ended up outside every
    /// projection support. Indicates a placement or radius bug, not bad input.
    #[error("projection coverage failure: {0}")]
    Coverage(String),

    #[error("constraint cycle detected on element {0}")]
    ConstraintCycle(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("volume constraint infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
