use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero matrix has no Lipschitz constant")]
    ZeroMatrix,

    #[error("measurement space is not compressed: m = {m} must be below n = {n}")]
    NotCompressed { m: usize, n: usize },

    #[error("enumeration budget exceeded: {count} > {budget}; {hint}")]
    BudgetExceeded {
        count: u128,
        budget: u128,
        hint: &'static str,
    },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("backward called without a recorded forward pass")]
    NoForward,

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("recovery failed at node {node}: {source}")]
    Recovery {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ties present in strict Kendall mode; use the tie-adjusted (tau-b) mode")]
    Ties,

    #[error("config error(s): {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("schema violation in field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
