use thiserror::Error;

/// Errors raised by the embedding, distillation, closed-set, map and file-format layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below {threshold:e}")]
    ZeroVector { threshold: f64 },

    #[error("segment {0} has a degenerate (near-zero) refined embedding")]
    ZeroSegmentEmbedding(u16),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("mask references segment {0} with no refined embedding record")]
    MissingSegment(u16),

    #[error("no covered pixels: coverage set is empty")]
    EmptyCoverage,

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    #[error("class {0} has no segments")]
    EmptyClass(u16),

    #[error("no labeled pixels to train on")]
    NoLabeledPixels,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("payload longer than declared: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("duplicate segment id {0}")]
    DuplicateSegment(u16),

    #[error("bad schema: {0}")]
    BadSchema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn zero_vector() -> Self {
        Error::ZeroVector {
            threshold: crate::embedding::ZERO_NORM_EPS,
        }
    }

    pub(crate) fn dim(expected: usize, found: usize) -> Self {
        Error::DimMismatch { expected, found }
    }
}
