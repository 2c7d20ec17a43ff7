use thiserror::Error;

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("measurement noise covariance is not positive definite")]
    SingularNoise,

    #[error("covariance rejected: {0}")]
    InvalidCovariance(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("filter diverged at t = {t:.4}: {reason}")]
    Divergence { t: f64, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SlamError>;
