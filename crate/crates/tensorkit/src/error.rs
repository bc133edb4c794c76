use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch (expected {expected}, found {found})")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("{op}: spatial dims must be even, got {dims:?}")]
    OddDims { op: &'static str, dims: [usize; 3] },
    #[error("{op}: invalid configuration: {reason}")]
    InvalidConfig { op: &'static str, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub fn shape(op: &'static str, expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        TensorError::ShapeMismatch {
            op,
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}
