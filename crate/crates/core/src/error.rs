use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("alignment failure at token {token}: previous boundary {boundary} leaves an empty window")]
    AlignmentFailure { token: usize, boundary: usize },

    #[error("oracle size guard exceeded: {0}")]
    OracleGuard(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (tau_max {tau_max}, utterance {utterance})")]
    Diverged {
        step: usize,
        tau_max: f64,
        utterance: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
