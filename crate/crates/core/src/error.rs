use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Parse,
    Validation,
    Calibration,
    Io,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("block index {index} out of range for {num_blocks} blocks")]
    BlockOutOfRange { index: usize, num_blocks: usize },

    #[error("{owner} kv cache contiguity violation: expected block {expected}, got {got}")]
    Contiguity {
        owner: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("kv cache entry {index} no longer matches its recorded digest")]
    EntryMutated { index: usize },

    #[error("incompatible decode snapshot: {0}")]
    IncompatibleSnapshot(String),

    #[error("score vector is empty")]
    EmptyScores,

    #[error("score vector contains a non-finite value")]
    NonFiniteScore,

    #[error("policy requires a score for block {0}")]
    MissingScore(usize),

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("{component} failed at block {block}: {message}")]
    Component {
        component: &'static str,
        block: usize,
        message: String,
    },

    #[error("invalid reference table: {0}")]
    InvalidTable(String),

    #[error("invalid quantile knots: {0}")]
    InvalidKnots(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("prompt {prompt_id}: missing blocks {missing:?}")]
    MissingBlocks {
        prompt_id: String,
        missing: Vec<usize>,
    },

    #[error("times must be positive, got {0}")]
    NonPositiveTime(f64),

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. } | Error::Format(_) => ErrorKind::Parse,
            Error::Calibration(_) | Error::InvalidKnots(_) => ErrorKind::Calibration,
            Error::Io(_) => ErrorKind::Io,
            Error::Component { .. } | Error::EntryMutated { .. } => ErrorKind::Internal,
            _ => ErrorKind::Validation,
        }
    }
}
