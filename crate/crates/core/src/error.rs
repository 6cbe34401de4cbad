use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GwclError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GwclError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("payload size mismatch: header implies {expected} bytes, file has {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("unsupported element type `{0}`")]
    UnsupportedDtype(String),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("class codes are not contiguous: missing code {missing} (max code {max})")]
    NonContiguousClasses { missing: u16, max: u16 },
    #[error("class {class} has {population} pixels; needs at least {required} to leave a test pixel")]
    ClassTooSmall {
        class: u16,
        population: usize,
        required: usize,
    },
    #[error("rank-deficient covariance: requested {requested} components but rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("index {index} out of range for {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("duplicate node index {0} in batch")]
    DuplicateIndex(usize),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("image encoding failed: {0}")]
    Image(String),
}

impl GwclError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GwclError::Io {
            path: path.into(),
            source,
        }
    }
}
