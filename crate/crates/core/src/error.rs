use thiserror::Error;

pub type Result<T> = std::result::Result<T, CossoError>;

#[derive(Debug, Error)]
pub enum CossoError {
    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error: {message} (condition estimate {condition:e})")]
    Numerical { message: String, condition: f64 },

    /// The active-set loop hit its cap; `best` is the last feasible iterate.
    #[error("garrote solver did not converge after {iterations} iterations")]
    GarroteNonConvergence { iterations: usize, best: Vec<f64> },

    #[error("degenerate score: {0}")]
    DegenerateScore(String),

    #[error("tuning error: {0}")]
    Tuning(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CossoError {
    pub fn input(msg: impl Into<String>) -> Self {
        CossoError::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>, condition: f64) -> Self {
        CossoError::Numerical {
            message: msg.into(),
            condition,
        }
    }

    /// Process exit code: 1 input, 2 numerical, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            CossoError::Input(_)
            | CossoError::Io(_)
            | CossoError::Csv(_)
            | CossoError::Json(_) => 1,
            CossoError::Numerical { .. }
            | CossoError::GarroteNonConvergence { .. }
            | CossoError::DegenerateScore(_)
            | CossoError::Tuning(_) => 2,
            CossoError::Internal(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CossoError::Input(_) => "input",
            CossoError::Numerical { .. } => "numerical",
            CossoError::GarroteNonConvergence { .. } => "garrote_non_convergence",
            CossoError::DegenerateScore(_) => "degenerate_score",
            CossoError::Tuning(_) => "tuning",
            CossoError::Internal(_) => "internal",
            CossoError::Io(_) => "io",
            CossoError::Csv(_) => "csv",
            CossoError::Json(_) => "json",
        }
    }
}
