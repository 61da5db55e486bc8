use std::path::PathBuf;

use thiserror::Error;

use crate::mfa::RestorationTrace;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at byte {offset} in {path}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no dominant blob: max sample {max} does not exceed 5x median {median}")]
    NoDominantBlob { max: f64, median: f64 },

    /// Gauss-Newton ran out of iterations; the best parameters seen are
    /// reported so a caller can still inspect them.
    #[error(
        "point-source fit did not converge after {iterations} iterations \
         (best so far: sigma={sigma}, center=({cx}, {cy}), rmse={fit_rmse})"
    )]
    FitNotConverged {
        iterations: usize,
        sigma: f64,
        cx: f64,
        cy: f64,
        fit_rmse: f64,
    },

    #[error("line orientation mismatch: expected a {expected} line but the dominant axis disagrees")]
    OrientationMismatch { expected: String },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// A single gradient step produced a non-finite sample.
    #[error("gradient step produced a non-finite sample")]
    NonFiniteStep,

    /// Annealing aborted; the trace covers every completed iteration.
    #[error("restoration diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<RestorationTrace>,
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

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
