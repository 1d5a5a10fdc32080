use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the geometry, patch, recovery and corpus routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence error: {0}")]
    Sequence(String),
    #[error("consistency error in {path}: {reason}")]
    Consistency { path: PathBuf, reason: String },
    #[error("mesh parse error in {path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("bake error: {0}")]
    Bake(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("crop error: {0}")]
    Crop(String),
    #[error("coverage error: {reason}")]
    Coverage { reason: String, pixels: Vec<(usize, usize)> },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("lookup error: {} vertices sample background (first: {:?})", .vertices.len(), .vertices.first())]
    Lookup { vertices: Vec<usize> },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("sample-size error: {0}")]
    SampleSize(String),
    #[error("material error: {0}")]
    Material(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("metadata error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
