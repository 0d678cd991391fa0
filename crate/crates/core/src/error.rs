use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("payload length mismatch: header implies {expected} bytes, file holds {actual}")]
    PayloadMismatch { expected: usize, actual: usize },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} {value} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: u64,
        limit: u64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parameter file: {0}")]
    ParamFile(String),

    #[error("forward pass was run without a gradient cache")]
    MissingCache,

    #[error("normal equations are rank deficient beyond the Tikhonov guard ({0})")]
    RankDeficient(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("training diverged at iteration {iteration} (last finite loss {last_finite_loss:e})")]
    Diverged {
        iteration: usize,
        last_finite_loss: f64,
    },

    #[error("dropout targets and multi-rate supervision points disagree on stages {0:?}")]
    Misaligned(Vec<usize>),

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's arguments or configuration
    /// rather than by the data or the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::InvalidConfig(_)
                | Error::Precondition(_)
                | Error::Misaligned(_)
        )
    }
}
