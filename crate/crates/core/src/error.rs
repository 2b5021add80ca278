use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is not skew-symmetric (|S + S^T| = {0:e})")]
    NotSkew(f64),
    #[error("matrix is not a rotation (orthogonality error {orth:e}, det {det})")]
    NotRotation { orth: f64, det: f64 },
    #[error("degenerate input to Gram-Schmidt (norm {0:e})")]
    Degenerate(f64),
    #[error("relative rotation at exactly pi has an ambiguous logarithm (frame {0})")]
    AmbiguousLog(usize),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid time step dt = {0}")]
    InvalidDt(f64),
    #[error("sequence too short: {len} frames, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("unknown robot id {id}; known ids: {known:?}")]
    UnknownRobot { id: usize, known: Vec<usize> },

    #[error("checksum mismatch in {path}: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },
    #[error("unsupported format version in {path}: {found}")]
    VersionMismatch { path: PathBuf, found: String },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
