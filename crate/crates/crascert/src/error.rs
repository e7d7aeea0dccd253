//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("no substitution image for variable `{0}`")]
    MissingSubstitution(String),
    #[error("variable `{0}` has no assigned value")]
    UnassignedVariable(String),
    #[error("integration bound contains the integration variable `{0}`")]
    BoundContainsVar(String),
    #[error("invalid field `{field}`: {msg}")]
    Invariant { field: String, msg: String },
    #[error("unsupported set shape: {0}")]
    UnsupportedSetShape(String),
    #[error("set too thin to sample (acceptance rate below 1e-6)")]
    ThinSet,
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("certificate rejected: {0}")]
    Residual(String),
    #[error("validation failure: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invariant(field: &str, msg: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}
