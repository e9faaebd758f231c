use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A covariance matrix could not be factorized within the jitter budget.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// A request exceeds a hard resource guard (dimension cap, point budget).
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    /// A model failed its construction-time consistency check.
    #[error("model validation failed: {0}")]
    ModelValidation(String),

    /// The requested quantity is undefined for the given inputs.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
