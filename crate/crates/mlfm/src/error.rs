use thiserror::Error;

/// Errors produced by the mlfm library.
#[derive(Debug, Error)]
pub enum MlfmError {
    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A covariance matrix failed symmetry or eigenvalue validation.
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    /// Cholesky factorization failed even after the jitter escalation policy.
    #[error("factorization failed ({context}): matrix is not positive definite after jitter")]
    FactorizationFailed { context: &'static str },

    /// An argument violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Optimization could not produce a finite objective from any restart.
    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    /// Experiment or model configuration is unusable.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MlfmError>;
