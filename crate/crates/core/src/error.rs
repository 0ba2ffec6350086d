use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum IlabError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected dimension {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("covariance of component {component} is not symmetric positive definite")]
    Factorization { component: usize },

    #[error("integration failed at step {step} (t = {t}): {reason}")]
    Integration { step: usize, t: f64, reason: String },

    #[error("estimator unsupported: {0}")]
    Estimator(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("too many dropped points: {dropped} of {total}")]
    DropBudget { dropped: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IlabError {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            IlabError::Config(_) | IlabError::Json(_) | IlabError::Factorization { .. } => 2,
            IlabError::Integration { .. } | IlabError::DropBudget { .. } => 3,
            IlabError::Domain(_) | IlabError::Shape { .. } => 2,
            IlabError::Estimator(_) | IlabError::Contract(_) => 2,
            IlabError::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, IlabError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(IlabError::Shape { expected, got });
    }
    Ok(())
}
