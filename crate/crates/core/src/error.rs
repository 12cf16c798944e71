use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("ill-conditioned matrix at frequency bin {bin:?}: {reason}")]
    IllConditioned { bin: Option<usize>, reason: String },

    #[error("solver diverged at (f={f}, n={n}): {reason}")]
    Divergence { f: usize, n: usize, reason: String },

    #[error("solver aborted at iteration {iteration}: {reason}")]
    SolverAborted {
        iteration: usize,
        reason: String,
        /// Exact negative log-likelihood after every completed block.
        nll_trace: Vec<f64>,
    },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDivergence { epoch: usize, reason: String },

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Parse {
        what: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("missing metadata: {0}")]
    MissingMetadata(String),

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

    /// True for failures caused by the numerics rather than by inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned { .. }
                | Error::Divergence { .. }
                | Error::SolverAborted { .. }
                | Error::TrainingDivergence { .. }
        )
    }
}
