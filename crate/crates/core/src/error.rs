use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("ingestion error in {file} at byte offset {offset}: {reason}")]
    Ingestion {
        file: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("leakage detected: {0}")]
    Leakage(String),

    #[error("fold for subject {subject} failed: {source}")]
    Fold {
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category code, used by the CLI as its process exit status.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Configuration(_) | Error::Parameter(_) | Error::Format(_) => 3,
            Error::Dimension(_)
            | Error::Index(_)
            | Error::DegenerateBatch(_)
            | Error::DegenerateInstance(_)
            | Error::Contract(_)
            | Error::Tape(_) => 4,
            Error::Routing(_) => 5,
            Error::Ingestion { .. } | Error::Split(_) => 6,
            Error::UndefinedMetric(_) => 7,
            Error::Leakage(_) => 8,
            Error::Io { .. } => 9,
            Error::Fold { source, .. } => source.exit_code(),
        }
    }
}
