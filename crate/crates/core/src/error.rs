use std::path::PathBuf;

use tensorkit::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed volume header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {found} bytes, header implies {expected}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("unsupported dtype {found:?} (expected {expected:?})")]
    UnsupportedDtype { expected: &'static str, found: String },
    #[error("trilinear resampling requested on a label grid")]
    ModeLabelMismatch,
    #[error("degenerate polygon on slice {z}: {vertices} vertices")]
    DegeneratePolygon { z: usize, vertices: usize },
    #[error("polygon slice {z} outside depth {nz}")]
    SliceOutOfRange { z: usize, nz: usize },
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("length mismatch: {what} has {found}, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("network has not been initialized from training or a checkpoint")]
    UntrainedNet,
    #[error("side mask is empty")]
    EmptySideMask,
    #[error("box {lo:?}..{hi:?} outside volume {dims:?}")]
    BoxOutOfRange { lo: [i64; 3], hi: [i64; 3], dims: [usize; 3] },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid phantom spec: {0}")]
    SpecInvalid(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match network: {0}")]
    CheckpointMismatch(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
