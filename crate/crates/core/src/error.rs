use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("singular covariance: {0}")]
    Singular(String),
    #[error("{0}")]
    NumericAbort(Box<NumericAbort>),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Diagnostics captured when training hits a non-finite loss or parameter.
#[derive(Debug)]
pub struct NumericAbort {
    pub epoch: usize,
    pub batch: usize,
    pub cause: String,
    /// Squared norm of every parameter tensor at the moment of failure.
    pub param_norms: Vec<(String, f64)>,
    /// Parameters as of the last completed epoch.
    pub last_good: Checkpoint,
}

impl std::fmt::Display for NumericAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite value at epoch {} batch {}: {}",
            self.epoch, self.batch, self.cause
        )?;
        let worst = self
            .param_norms
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Greater));
        if let Some((name, norm)) = worst {
            write!(f, " (largest parameter norm^2: {name} = {norm:e})")?;
        }
        Ok(())
    }
}
