use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("grid mismatch: fields live on different grids")]
    GridMismatch,

    #[error("flow escape: trajectory from node {node} left the extension region")]
    FlowEscape { node: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("linear solver failed: {reason} (residual {residual:e})")]
    LinearSolver { reason: String, residual: f64 },

    #[error("newton did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular jacobian: {0}; consider a symmetry restriction")]
    Singular(String),

    #[error("spectral solver did not converge: {0}")]
    Spectral(String),

    #[error("degenerate auxiliary field: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidSpec {
        field: field.to_string(),
        reason: reason.into(),
    }
}
