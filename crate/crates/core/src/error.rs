use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("channel baseline already captured at iteration {0}")]
    BaselineAlreadyCaptured(usize),

    #[error("channel baseline must be captured at iteration 0, not {0}")]
    BaselineNotAtInit(usize),

    #[error("layer {0} has no alive channels left")]
    EmptyLayer(usize),

    #[error("non-finite loss at iteration {iteration}: {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("dataset parse error: {0}")]
    Dataset(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Decoding failures of the binary model formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("length mismatch in layer {layer}: dims imply {expected} values, payload declares {found}")]
    LengthMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown layer tag {tag} at byte {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("malformed model: {0}")]
    Malformed(String),
}

impl FormatError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic(_) => 1,
            FormatError::UnsupportedVersion(_) => 2,
            FormatError::Truncated(_) => 3,
            FormatError::LengthMismatch { .. } => 4,
            FormatError::UnknownTag { .. } => 5,
            FormatError::Malformed(_) => 6,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
