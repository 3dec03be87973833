use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("empty point cloud: {0}")]
    EmptyCloud(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point out of normalization range: {0}")]
    OutOfRange(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tape misuse: {0}")]
    Tape(String),
    #[error("octree growth produced no occupied nodes at level {level}")]
    EmptyGrowth { level: u8 },
    #[error("super-resolution failed for {} block(s): {}", .0.len(), .0.join("; "))]
    Pipeline(Vec<String>),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("non-finite loss at epoch {epoch}, block {block}")]
    NonFiniteLoss { epoch: usize, block: usize },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("unsupported archive version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("degenerate circle fit: {0}")]
    DegenerateFit(String),
    #[error("no circle found: {0}")]
    NoCircle(String),
    #[error("no points: {0}")]
    NoPoints(String),
    #[error("stem reconstruction failed: {0}")]
    Reconstruction(String),
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
