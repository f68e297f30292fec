use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("conv2d: unsupported kernel size {kh}x{kw} (only 1x1 and 3x3)")]
    UnsupportedKernel { kh: usize, kw: usize },
    #[error("{op}: odd spatial extent {h}x{w}")]
    OddSpatial {
        op: &'static str,
        h: usize,
        w: usize,
    },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch_norm: variance undefined for a single element per channel")]
    SingletonBatch,
    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: usize, classes: usize },
    #[error("matrix is significantly indefinite (eigenvalue {0})")]
    NotPsd(f64),
    #[error("invalid statistics: {0}")]
    Stats(String),
    #[error("unsupported resolution {0}")]
    UnsupportedResolution(usize),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
