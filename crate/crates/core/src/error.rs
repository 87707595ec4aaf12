use std::io;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: cannot normalize over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    ValueCount { shape: Vec<usize>, len: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tensor belongs to a tape that was cleared or never existed")]
    StaleTensor,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid config `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("non-finite value in {0}")]
    NotFinite(String),

    #[error("length mismatch in {what}: {left} vs {right}")]
    Length {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("dataset csv: {0}")]
    DatasetFormat(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
