use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate GPU name `{0}` in catalog")]
    DuplicateGpu(String),

    #[error("GPU `{gpu}`: field `{field}` must be strictly positive (got {value})")]
    NonPositiveField {
        gpu: String,
        field: String,
        value: f64,
    },

    #[error("unknown GPU `{0}`")]
    UnknownGpu(String),

    #[error("{what}: expected rank {expected}, got {actual}")]
    RankMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: dimension {index} must be positive")]
    NonPositiveDim { op: String, index: usize },

    #[error("unknown operator `{0}`")]
    UnknownOperator(String),

    #[error("utilization {0} is outside (0, 1]")]
    UtilizationOutOfRange(f64),

    #[error("memory per tile is zero")]
    ZeroTileMemory,

    #[error("weight shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("untrained operator: no predictor weights for `{0}`")]
    UntrainedOperator(String),

    #[error("weight file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt weight file {path}: {reason}")]
    CorruptWeights { path: String, reason: String },

    #[error("graph has a cycle through node `{0}`")]
    Cycle(String),

    #[error("edge references missing node `{0}`")]
    DanglingEdge(String),

    #[error("shape mismatch on edge {src} -> {dst}: {detail}")]
    ShapeInconsistent {
        src: String,
        dst: String,
        detail: String,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid fusion group [{group}]: {reason}")]
    InvalidFusion { group: String, reason: String },

    #[error("invalid parallel plan: {0}")]
    InvalidPlan(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty range for {0}")]
    EmptyRange(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no prediction labelled `{0}`")]
    MissingLabel(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            message: message.into(),
        }
    }
}
