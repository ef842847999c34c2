use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("expected a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a backward pass; reset it first")]
    TapeConsumed,

    #[error("degenerate batch for batch statistics: {0}")]
    DegenerateBatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("mean over an empty set: {0}")]
    EmptyMean(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(&'static str),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("refusing to overwrite existing {0} (pass --force)")]
    Exists(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
