use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid edge ({from}, {to}) for a graph of {stations} stations")]
    InvalidEdge { from: usize, to: usize, stations: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing configuration key `{0}`")]
    MissingKey(String),

    #[error("schema version {found} is not supported (expected {expected}); regenerate the file")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("training diverged at step {step} (epoch {epoch}): loss = {loss}")]
    Divergence { step: usize, epoch: usize, loss: f64 },

    #[error("decoder state is uninitialized; run the encoder and hand off first")]
    Uninitialized,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, message: message.into() }
    }

    /// Short machine-readable category, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidEdge { .. } => "invalid-edge",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::MissingKey(_) => "missing-key",
            Error::SchemaVersion { .. } => "schema-version",
            Error::Dimension(_) => "dimension",
            Error::InsufficientData(_) => "insufficient-data",
            Error::EmptyInput(_) => "empty-input",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Divergence { .. } => "divergence",
            Error::Uninitialized => "uninitialized",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}
