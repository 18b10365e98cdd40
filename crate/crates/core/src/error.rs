use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("parameter trees differ: {0}")]
    ParamMismatch(String),

    #[error("ode solve produced a non-finite state at substep {substep}")]
    OdeDiverged { substep: usize },

    #[error("encoder hidden state became non-finite at timestep {0}")]
    EncoderDiverged(usize),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("replay buffer: {0}")]
    Replay(String),

    #[error("{what} produced a non-finite loss (batch row {row})")]
    NonFiniteLoss { what: &'static str, row: usize },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
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

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
