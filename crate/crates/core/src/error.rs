use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a bundle file or a checkpoint.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("dimension inconsistency: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: declared shape {declared:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        declared: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {name:?}: offset {offset} with {len} bytes exceeds blob of {blob} bytes")]
    BadOffset {
        name: String,
        offset: usize,
        len: usize,
        blob: usize,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Parse(#[from] FormatError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("variant {variant} seed {seed}: {source}")]
    Run {
        variant: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::State(_) => "state",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::Format { .. } | Error::Parse(_) => "format",
            Error::Diverged { .. } => "diverged",
            Error::Run { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
