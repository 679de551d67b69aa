use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("solver diverged: |s| = {magnitude:e} exceeds {threshold:e} at t = {time}")]
    SolverDivergence {
        magnitude: f64,
        threshold: f64,
        time: f64,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss in noise draw {draw}")]
    TrainingDivergence { epoch: u64, draw: usize },

    #[error("non-finite loss in noise draw {draw}")]
    NonFiniteLoss { draw: usize },

    #[error("sensor {sensor} has zero variance across the training inputs")]
    DegenerateFeature { sensor: usize },

    #[error("target values have zero variance")]
    DegenerateTarget,

    #[error("value set collapses to a single spike (range {range:e})")]
    SingleSpike { range: f64 },

    #[error("truth vector has zero norm")]
    ZeroNormTruth,

    #[error("dataset is normalized but no normalization statistics are available")]
    MissingNormStats,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u8,
        expected: u8,
    },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("model spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("I/O error on {path}: {source}")]
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

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
