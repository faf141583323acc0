use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("missing input for patch `{patch_id}`: {path}")]
    Ingestion { patch_id: String, path: PathBuf },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("model error: {0}")]
    Model(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 io, 4 model, 5 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Routing(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Ingestion { .. } => 3,
            Error::Model(_) | Error::Dimension { .. } | Error::Index(_) | Error::State(_) => 4,
            Error::Numeric(_) => 5,
        }
    }
}
