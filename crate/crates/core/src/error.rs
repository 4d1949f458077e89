use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("expected 3 spatial dimensions, found {0}")]
    Dimensionality(i16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("type error: {0}")]
    Type(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("dangling weight reference `{0}`")]
    DanglingWeight(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("memory plan violation: {0}")]
    PlanViolation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
