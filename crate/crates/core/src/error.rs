use std::path::PathBuf;

use crate::param::ParamVector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid noise: {0}")]
    InvalidNoise(String),

    #[error("undefined angle: {0}")]
    UndefinedAngle(String),

    /// A non-finite objective value was observed during an SPSA step. The
    /// parameters that produced it are carried along so the caller can persist
    /// them.
    #[error("objective diverged (J+ = {j_plus}, J- = {j_minus}){}", context.as_deref().map(|c| format!(" at {c}")).unwrap_or_default())]
    ObjectiveDivergence {
        params: Box<ParamVector>,
        j_plus: f64,
        j_minus: f64,
        context: Option<String>,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("run directory {path}: {reason}")]
    RunDir { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim_mismatch(lhs: usize, rhs: usize) -> Self {
        Error::InvalidDimension(format!("dimension mismatch: {lhs} vs {rhs}"))
    }

    /// Attach a location (iteration/step) to a divergence error.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::ObjectiveDivergence {
                params,
                j_plus,
                j_minus,
                context: _,
            } => Error::ObjectiveDivergence {
                params,
                j_plus,
                j_minus,
                context: Some(ctx.into()),
            },
            other => other,
        }
    }
}
