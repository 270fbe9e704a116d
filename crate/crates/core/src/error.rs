use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("weight design degenerate: {0}")]
    DesignDegenerate(String),

    /// The optimality gap grew past the divergence guard; the partial trace is kept.
    #[error("iteration diverged after {} outer steps", .0.records.len().saturating_sub(1))]
    DivergenceDetected(Box<crate::solver::RunTrace>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
