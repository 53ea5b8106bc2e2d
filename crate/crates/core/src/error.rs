use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no convergence after {0} sweeps")]
    NoConvergence(usize),

    #[error("Lanczos breakdown could not be recovered after {0} restarts")]
    Breakdown(usize),

    #[error("network needs at least one hidden layer")]
    RejectNoHidden,

    #[error("activation trace was produced by a different architecture")]
    StaleTrace,

    #[error("{what} too large: {size} > {limit}")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("index {index} out of range for dataset of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty index set")]
    EmptyIndices,

    #[error("probe kind `jitter` needs a reference dataset")]
    MissingReference,

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("every sample has zero norm")]
    ZeroNormSample,

    #[error("corrupt checkpoint {path}: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    DivergenceAbort { epoch: usize, batch: usize },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("bound requires the MSE loss")]
    WrongLoss,

    #[error("layer {0} is not a dense layer")]
    UnsupportedLayer(usize),

    #[error("too many skipped samples: {skipped} of {total}")]
    SkipRate { skipped: usize, total: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sweep failed: {failed} of {total} cells failed")]
    SweepFailed { failed: usize, total: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
