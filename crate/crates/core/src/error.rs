use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty reduction over axis {axis} of shape {shape:?}")]
    EmptyReduction { axis: usize, shape: Vec<usize> },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown channel name `{0}`")]
    UnknownChannel(String),

    #[error("filter design: {0}")]
    FilterDesign(String),

    #[error("label {label} outside class range 0..{n_classes}")]
    InvalidLabel { label: usize, n_classes: usize },

    #[error("rating {0} outside [1, 9]")]
    RatingOutOfRange(f64),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("size mismatch in {context}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        context: String,
        expected: u64,
        found: u64,
    },

    #[error("unsupported format_version `{0}`")]
    UnsupportedVersion(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("malformed manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not enough ids for {scheme}: {reason}")]
    SplitTooSmall { scheme: String, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
