use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A floating-point result overflowed or became NaN.
    #[error("numeric range error: {0}")]
    NumericRange(String),

    /// The wave function vanishes (to within the floor) at the evaluation point.
    #[error("near-node evaluation at x1={x1}, x2={x2}, t={t}")]
    NearNode { x1: f64, x2: f64, t: f64 },

    /// A trajectory state stopped being finite.
    #[error("non-finite trajectory state at t={t}")]
    NonFiniteState { t: f64 },

    #[error("sampling failure: {0}")]
    Sampling(String),

    /// Too many trajectories were rejected for the ensemble to be trusted.
    #[error("ensemble rejected {rejected} of {total} trajectories (ceiling {ceiling})")]
    RejectionCeiling {
        rejected: usize,
        total: usize,
        ceiling: f64,
    },

    #[error("coarse-graining failure: {0}")]
    CoarseGrain(String),

    #[error("fit failure: {0}")]
    Fit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
