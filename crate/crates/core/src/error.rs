//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

/// Coarse category of an error, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input shape, bad flag, bad file contents.
    Validation,
    /// A factorization or pivot failed.
    Numerical,
    /// Filesystem failure.
    Io,
}

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite element at index {0}")]
    NonFinite(usize),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("dtype byte {0} not in {{0,1}}")]
    BadDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("pivot {pivot} too small: {value:e}")]
    PivotTooSmall { pivot: usize, value: f64 },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("unsupported bit-width {0} (expected 2, 3, 4 or 8)")]
    UnsupportedBits(u32),

    #[error("code {code} out of range for {bits}-bit grid")]
    CodeOutOfRange { code: u32, bits: u32 },

    #[error("empty input")]
    EmptyInput,

    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("layer {layer} ({stage}): {source}")]
    Layer {
        layer: usize,
        stage: &'static str,
        #[source]
        source: Box<QuantError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl QuantError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            QuantError::NotPositiveDefinite { .. } | QuantError::PivotTooSmall { .. } => {
                ErrorKind::Numerical
            }
            QuantError::Io { .. } => ErrorKind::Io,
            QuantError::Layer { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        QuantError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn in_layer(self, layer: usize, stage: &'static str) -> Self {
        QuantError::Layer {
            layer,
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, QuantError>;
