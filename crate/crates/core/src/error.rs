use std::path::PathBuf;

use thiserror::Error;

use crate::store::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite tactile reading in episode {episode} at timestep {timestep}")]
    NonFiniteTactile { episode: String, timestep: usize },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("stale forward cache: cached for parameter version {cached}, policy is at {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("non-finite sampler state at integration step {step}")]
    NonFiniteSample { step: usize },

    #[error("tactile input reached the forward path of a proprio-only policy")]
    TactileLeak,

    #[error("tactile-conditioned policy called without tactile input")]
    MissingTactile,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure at training step {step}: {detail}")]
    Numeric { step: u64, detail: String },

    #[error(transparent)]
    Format(#[from] FormatError),

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
}
