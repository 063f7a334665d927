use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("integration blew up at step {step}")]
    IntegrationFailure { step: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid observation operator: {0}")]
    InvalidIndices(String),

    #[error("grid point {point} has only {count} observations, at least 4 are required")]
    UnderObserved { point: usize, count: usize },

    #[error("degenerate ensemble at k={k}: zero spread at observed component {index}")]
    DegenerateEnsemble { k: usize, index: usize },

    #[error("inflation minimization failed on [{lower:e}, {upper:e}]: {reason}")]
    Minimization {
        lower: f64,
        upper: f64,
        reason: String,
    },

    #[error("model failure on ensemble member {member} at k={k}: {source}")]
    Member {
        member: usize,
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("filter failed at k={k}: {source}")]
    Filter {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {loss}")]
    Training { epoch: usize, batch: usize, loss: f64 },

    #[error("forecast blew up for initial condition {ic} at lead {lead}")]
    Forecast { ic: usize, lead: usize },

    #[error("Lyapunov frame lost rank at step {step}")]
    RankCollapse { step: usize },

    #[error("hybrid run failed after {aborted} consecutive aborted cycles (last cycle {cycle})")]
    HybridDiverged { cycle: usize, aborted: usize },

    #[error("architecture mismatch: file has {found}, expected {expected}")]
    ArchitectureMismatch { found: String, expected: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Validation problems are caller mistakes; everything else is numerical or I/O.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Dimension { .. }
            | Error::InvalidParameter(_)
            | Error::InvalidIndices(_)
            | Error::Config(_)
            | Error::UnderObserved { .. }
            | Error::MissingArtifact(_)
            | Error::Format { .. }
            | Error::ArchitectureMismatch { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(context: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(context))
    }
}
