use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite log-amplitude at configuration {config:?}")]
    NonFinite { config: Vec<i8> },
    #[error("non-finite entry in row {row}, parameter block `{block}`")]
    NonFiniteSystem { row: usize, block: String },
    #[error("manifold dimension {dim} exceeds the configured cap {cap}")]
    ManifoldTooLarge { dim: usize, cap: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("configuration field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("missing columns in {path}: {columns:?}")]
    Schema { path: String, columns: Vec<String> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
