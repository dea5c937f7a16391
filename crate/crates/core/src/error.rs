use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ground set of size {size} exceeds the enumeration limit of {limit}")]
    GroundSetTooLarge { size: usize, limit: usize },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("fixed-point solver diverged: {0}")]
    Divergence(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("retention budget exceeded: {retained} bytes retained, cap is {cap}")]
    RetentionBudget { retained: usize, cap: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
