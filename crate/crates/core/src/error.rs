use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("payload length mismatch: header implies {expected} bytes, found {actual}")]
    HeaderPayloadMismatch { expected: usize, actual: usize },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("non-finite input at element {index}")]
    NonFiniteInput { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("calibration set is empty")]
    EmptyCalibrationSet,

    #[error("calibration pixel ({row}, {col}) has no label")]
    UnlabeledCalPixel { row: usize, col: usize },

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("empty input")]
    EmptyInput,

    #[error("need at least {required} labeled pixels, found {labeled}")]
    NotEnoughLabeledPixels { labeled: usize, required: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed csv in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::MissingFile(_) | Error::Io { .. })
    }
}
