use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("model bundle error: {0}")]
    Bundle(String),

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("reference set is empty")]
    EmptyReference,

    #[error("surrogate design matrix is rank-deficient (rank {rank} < {columns})")]
    SingularFit { rank: usize, columns: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Coarse classification used by the command line for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Inference(_) | Error::Bundle(_) => ErrorKind::Inference,
            Error::InvalidArgument(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Inference,
}
