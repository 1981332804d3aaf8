use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("transform size {0} is not a power of two")]
    TransformSize(usize),

    #[error("unsupported activation bit width {0} (expected 4 or 8)")]
    InvalidBits(u32),

    #[error("{what} {value} out of range {lo}..={hi}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        lo: usize,
        hi: usize,
    },

    #[error("compute graph already consumed by a backward pass")]
    GraphConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("empty evaluation set: {0}")]
    Empty(&'static str),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint variant {found} does not match configured variant {expected}")]
    VariantMismatch { expected: String, found: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
