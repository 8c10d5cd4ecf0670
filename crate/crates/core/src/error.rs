use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("no backward rule registered for op `{0}`")]
    UnregisteredBackward(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("unexpected weight `{0}`")]
    UnexpectedWeight(String),

    #[error("weight `{name}` has shape {actual:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: malformed file: {msg}")]
    Malformed { path: PathBuf, msg: String },

    #[error("{path}: unsupported image format: {msg}")]
    UnsupportedFormat { path: PathBuf, msg: String },

    #[error("config line {line}: unknown key `{key}`")]
    UnknownConfigKey { line: usize, key: String },

    #[error("config: {0}")]
    Config(String),

    #[error("metric: mask selects no valid pixels")]
    EmptyMask,

    #[error("loss: missing level {0}")]
    MissingLevel(usize),

    #[error("training diverged at stage {stage}, iteration {iteration} (loss {loss})")]
    Diverged {
        stage: usize,
        iteration: usize,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            msg: msg.into(),
        }
    }

    /// True for failures reading or writing the filesystem.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
