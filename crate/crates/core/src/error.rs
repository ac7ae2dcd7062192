use thiserror::Error;

/// Errors produced by the transform library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("vertex {vertex} has zero degree")]
    IsolatedVertex { vertex: usize },

    #[error("eigensolver did not converge{}: residuals {residuals:?}", node.map(|n| format!(" at tree node {n}")).unwrap_or_default())]
    NoConvergence {
        node: Option<usize>,
        residuals: Vec<f64>,
    },

    #[error("column stream error: {0}")]
    Stream(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
