//! Error type shared by all pipeline stages.

use thiserror::Error;

use crate::tensor::ComponentSet;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A required singular/eigen value fell below the relative rank cutoff.
    #[error("rank deficiency: sigma_{index} = {value:.3e} is below threshold {threshold:.3e}")]
    RankDeficient {
        index: usize,
        value: f64,
        threshold: f64,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An empirical zero-pattern count was zero, so the plug-in log estimate
    /// is undefined. Carries the offending index set; the caller may raise N.
    #[error("insufficient data: zero count for pattern {pattern}")]
    InsufficientData { pattern: String },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    /// The decomposition trial budget ran out before finding `target`
    /// components; whatever was found is returned for inspection.
    #[error("found {} of {target} components after {trials} trials", found.len())]
    PartialDecomposition {
        found: ComponentSet,
        target: usize,
        trials: usize,
    },

    /// Wraps an error with the pipeline stage it occurred in.
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
}

impl Error {
    /// Tag an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidInput(_) | Error::ShapeMismatch(_) | Error::MalformedFile { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
