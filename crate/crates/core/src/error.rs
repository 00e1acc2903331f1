use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("unknown token {0:?}")]
    Vocabulary(String),

    /// Reference and target prompts name different anomaly types.
    #[error("prompt pair mismatch: reference names {reference:?}, target names {target:?}")]
    PairMismatch { reference: String, target: String },

    #[error("non-finite value in {what} at step {step}")]
    Numerical { what: String, step: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("configuration: {0}")]
    Config(String),

    /// A parameter set that must stay frozen changed.
    #[error("frozen parameters modified: {0}")]
    Frozen(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad user input rather than numerics or IO.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Vocabulary(_)
                | Error::PairMismatch { .. }
                | Error::Config(_)
                | Error::Protocol(_)
                | Error::Contract(_)
                | Error::Dimension { .. }
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::UndefinedMetric(_))
    }
}
