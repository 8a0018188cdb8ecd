use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("bad dataset item {path}: {reason}")]
    Item { path: PathBuf, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("cannot split dataset: {0}")]
    Split(String),

    #[error("invalid scene spec: {0}")]
    Spec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid bounding box: {0}")]
    Box(String),

    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid argument: {0}")]
    Arg(String),

    #[error("non-finite value: {0}")]
    Num(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Train { epoch: usize, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("stage `{stage}`: {reason}")]
    Stage { stage: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn stage(stage: &str, reason: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            reason: reason.into(),
        }
    }
}
