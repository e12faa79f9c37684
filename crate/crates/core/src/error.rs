use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("decomposition input `{name}` contains non-finite entries")]
    DecompositionInput { name: String },

    #[error("SVD did not converge for matrix `{name}`")]
    Numerical { name: String },

    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("pooling ratio error: source grid {src} is not an integer multiple of target grid {tgt}")]
    PoolingRatio { src: usize, tgt: usize },

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("evaluation error: unknown label(s) {0:?}")]
    UnknownLabels(Vec<String>),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("report error: missing artifacts {0:?}")]
    Report(Vec<String>),

    #[error("frozen arrays changed during adaptation: {0}")]
    FrozenChanged(String),
    #[error("parameter accounting mismatch: {0}")]
    Accounting(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Training,
    Other,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::PoolingRatio { .. } | Error::UnknownMethod(_) => {
                ErrorKind::Config
            }
            Error::Generation(_)
            | Error::Ingestion { .. }
            | Error::Prompt(_)
            | Error::UnknownLabels(_)
            | Error::Report(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::Training { .. }
            | Error::Numerical { .. }
            | Error::DecompositionInput { .. }
            | Error::FrozenChanged(_) => ErrorKind::Training,
            _ => ErrorKind::Other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
