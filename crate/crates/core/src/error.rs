use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("invalid mask: no position is enabled")]
    InvalidMask,
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path}:{line}: label {label:?} is not a label of task {task:?}")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
        task: String,
    },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
