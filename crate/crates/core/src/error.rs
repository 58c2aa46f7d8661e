use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model validation failed: {0}")]
    ModelValidation(String),

    #[error("decomposition failed: {reason} (minimum eigenvalue {min_eigenvalue:e})")]
    Decomposition { reason: String, min_eigenvalue: f64 },

    #[error("control not admissible: {0}")]
    Admissibility(String),

    #[error("unsupported jump law: {0}")]
    UnsupportedLaw(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("inconclusive estimate: {0}")]
    Inconclusive(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate jump: {0}")]
    DegenerateJump(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
