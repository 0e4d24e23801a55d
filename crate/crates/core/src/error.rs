use thiserror::Error;

#[derive(Debug, Error)]
pub enum SfaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mode index {mode} out of range for a {order}-way array")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("invalid ranks: {0}")]
    InvalidRanks(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (eigenvalue ratio {ratio:.3e})")]
    Singular { ratio: f64 },

    #[error("update for mode {mode} is ill-defined: {reason}")]
    IllDefinedUpdate { mode: usize, reason: String },

    #[error("design matrix is rank deficient ({0})")]
    RankDeficient(String),

    #[error("maximum likelihood iteration diverged after {sweeps} sweeps; the estimates likely do not exist")]
    Diverged { sweeps: usize },

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SfaError {
    /// Numerical failures (as opposed to bad input) map to their own exit status in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SfaError::Singular { .. }
                | SfaError::IllDefinedUpdate { .. }
                | SfaError::RankDeficient(_)
                | SfaError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SfaError>;
