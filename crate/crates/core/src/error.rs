use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: length {len} bytes is not a multiple of {record} (truncated record)")]
    TruncatedRecord {
        path: PathBuf,
        len: u64,
        record: u64,
    },
    #[error("{path}: non-finite value in point {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("label count mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("unknown semantic id(s) {0:?}")]
    UnknownRawId(Vec<u32>),
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("point {index} has zero range")]
    ZeroRange { index: usize },
    #[error("cannot project an empty point cloud")]
    EmptyCloud,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("non-finite {what} at {context}")]
    NonFiniteValue { what: &'static str, context: String },
    #[error("no loss terms enabled")]
    NoLossTerms,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("degenerate scene: no ray hit anything")]
    NoHits,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
