use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::MetricId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not enough episodes: need {required} (train + valid) but only {available} available")]
    InsufficientEpisodes { required: usize, available: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("metric {0} unavailable")]
    MetricUnavailable(MetricId),

    #[error("metric {metric}: {source}")]
    Metric {
        metric: MetricId,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged (seed {seed}): non-finite loss at epoch {epoch}")]
    Diverged { seed: u64, epoch: usize },

    #[error("incomplete metric grid, missing {} entries (first: {})", .0.len(), .0.first().map(|k| format!("config={} seed={} checkpoint={}", k.0, k.1, k.2)).unwrap_or_default())]
    IncompleteGrid(Vec<(u32, u32, u32)>),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_metric(self, metric: MetricId) -> Self {
        match self {
            e @ Error::MetricUnavailable(_) => e,
            e => Error::Metric {
                metric,
                source: Box::new(e),
            },
        }
    }
}
