use thiserror::Error;

/// Errors produced by parameterizations, models and harnesses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("ill-conditioned {what}: condition estimate {cond:e} exceeds {threshold:e}")]
    IllConditioned {
        what: &'static str,
        cond: f64,
        threshold: f64,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("structure violation: {0}")]
    Structure(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(
    context: impl std::fmt::Display,
    expected: impl std::fmt::Display,
    got: impl std::fmt::Display,
) -> Error {
    Error::Dimension(format!("{context}: expected {expected}, got {got}"))
}
