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

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("ingest error at row {row}, column {column}: {message}")]
    Ingest {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("tuning failed at hawk {hawk} after {} completed iterations: {source}", .trace.len())]
    Tuning {
        hawk: usize,
        /// Best fitness after each iteration that finished before the failure.
        trace: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("search failed: every trial errored ({})", .causes.join("; "))]
    Search { causes: Vec<String> },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the command line to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::Parameter(_) => ErrorKind::Config,
            Error::Ingest { .. } | Error::Input(_) | Error::Csv(_) => ErrorKind::Data,
            Error::Io { .. } | Error::Checkpoint(_) => ErrorKind::Data,
            Error::Tuning { source, .. } => source.kind(),
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::Search { .. }
            | Error::Diverged(_) => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}
