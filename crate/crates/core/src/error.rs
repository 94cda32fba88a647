use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("overlap violated: {0}")]
    Overlap(String),

    #[error("design matrix for basis {basis} is rank deficient (rank {rank} < {required})")]
    RankDeficient {
        basis: String,
        rank: usize,
        required: usize,
    },

    #[error("singular matrix in {context} (condition estimate {condition:e}){hint}")]
    Singular {
        context: &'static str,
        condition: f64,
        hint: &'static str,
    },

    #[error("action spaces differ: {0}")]
    ActionSpaceMismatch(String),

    #[error("{method} did not converge after {iterations} iterations (last objective {last_objective})")]
    NonConvergence {
        method: &'static str,
        iterations: usize,
        last_objective: f64,
    },

    #[error("separation detected in logistic fit: {0}; consider adding L2 jitter")]
    Separation(String),

    #[error("non-finite value during training at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed data: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
