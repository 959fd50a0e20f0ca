use thiserror::Error;

/// Errors produced by the numerical core and the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular matrix (condition estimate {condition:.3e})")]
    SingularMatrix { condition: f64 },

    #[error("step size underflow at t = {t}: h = {h:.3e} below h_min")]
    StepUnderflow { t: f64, h: f64 },

    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepBudget { t: f64, max_steps: usize },

    #[error("equilibrium solve did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64, best: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::SingularMatrix { .. } => "singular_matrix",
            Error::StepUnderflow { .. } => "step_underflow",
            Error::StepBudget { .. } => "step_budget",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Config(_) => "config",
            Error::Verification(_) => "verification",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
