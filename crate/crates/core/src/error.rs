use std::path::PathBuf;

/// Errors raised anywhere in the tracking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("spatial size {height}x{width} must be divisible by {divisor}")]
    Divisibility {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("loss node is not a scalar (shape {0:?})")]
    NonScalarLoss([usize; 4]),

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

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
