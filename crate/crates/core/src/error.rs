use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid partition: cannot split horizon {horizon} into {subplans} subplans")]
    InvalidPartition { horizon: usize, subplans: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("noise index {index} out of range [0, {max}]")]
    NoiseIndex { index: usize, max: usize },

    #[error("model contract violated: {0}")]
    ModelContract(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("guidance error: {0}")]
    Guidance(String),

    #[error("DDIM step order violated: {from} -> {to}")]
    StepOrder { from: usize, to: usize },

    #[error("tree contract violated: {0}")]
    TreeContract(String),

    #[error("maze parse error at line {line}: {msg}")]
    MazeParse { line: usize, msg: String },

    #[error("maze validation error: {0}")]
    MazeValidation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
