use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid rank: {0}")]
    Rank(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("lineage mismatch: {0}")]
    Lineage(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("environment error: {0}")]
    Env(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Rank(_) => 2,
            Error::Lineage(_) => 3,
            _ => 4,
        }
    }
}
