//! Crate-wide error type.
//!
//! Variants are grouped by how callers should react: `InvalidArgument` and
//! `Shape` are programming or configuration mistakes, `Data` and
//! `DuplicateDocId` point at a specific place in an input file, and
//! `Config` covers experiment-config parsing and schema violations. The CLI
//! maps these groups onto distinct process exit codes.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Data {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate document id `{id}` at {path}:{line} (first seen at line {first_line})")]
    DuplicateDocId {
        path: PathBuf,
        id: String,
        first_line: usize,
        line: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("study check failed: {0}")]
    StudyCheck(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code the CLI reports for this error: 2 for config or
    /// schema problems, 3 for data problems, 4 for failed study checks,
    /// 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } | Error::DuplicateDocId { .. } | Error::Io { .. } => 3,
            Error::StudyCheck(_) => 4,
            Error::InvalidArgument(_) | Error::Shape(_) => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
