use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("header file not found: {0}")]
    MissingHeader(PathBuf),
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("raw payload {path} has {actual} bytes, expected {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("non-finite value at voxel {index}")]
    NonFiniteData { index: usize },
    #[error("label value {value} at voxel {index} is not 0 or 1")]
    NonBinaryLabel { index: usize, value: u8 },
    #[error("probability {value} at voxel {index} is outside [0, 1]")]
    InvalidProbability { index: usize, value: f32 },
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json failure on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate case id {0:?}")]
    DuplicateCaseId(String),
    #[error("case {case_id:?}: {reason}")]
    InconsistentAnnotation { case_id: String, reason: String },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid spacing {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("no foreground voxels in the provided cases")]
    EmptyForeground,
    #[error("standard deviation is zero")]
    ZeroStd,
    #[error("mask is empty")]
    EmptyMask,
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("stability score needs at least one early mask")]
    NoEarlyMasks,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dims {dims:?} too small: {reason}")]
    DimsTooSmall { dims: [usize; 3], reason: String },
    #[error(transparent)]
    Segmenter(#[from] crate::bridge::SegmenterError),
    #[error("state corruption: {0}")]
    StateCorruption(String),
    #[error("state has no completed rows")]
    EmptyState,
    #[error("config error: {0}")]
    Config(String),
}

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
}
