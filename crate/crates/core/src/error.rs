use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {table} ({len} rows)")]
    Index {
        table: String,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible file: {0}")]
    Format(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
