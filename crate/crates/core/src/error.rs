use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum VibeError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("malformed header in {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("payload length mismatch in {path}: expected {expected} bytes, found {actual}")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("default sigma^2 is zero: all tokens are identical")]
    ZeroVariance,

    #[error("affinity underflow between tokens {i} and {j}: sigma^2 = {sigma_sq} is too small")]
    AffinityUnderflow { i: usize, j: usize, sigma_sq: f64 },

    #[error("eigensolver did not converge: relative residual {residual:e} on component {component}")]
    EigenNonConvergence { component: usize, residual: f64 },

    #[error("nystrom kernel degenerate: {0}")]
    NystromDegenerate(String),

    #[error("point too far from the training cloud: kernel degree {degree:e} underflows")]
    DegreeUnderflow { degree: f64 },

    #[error("inverse mapping diverged at iteration {iteration}: objective {objective:e}")]
    Diverged { iteration: usize, objective: f64 },

    #[error("geodesic solve failed at alpha = {alpha}: {source}")]
    PathPoint {
        alpha: f64,
        #[source]
        source: Box<VibeError>,
    },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training diverged: final reconstruction {final_recon:e} exceeds initial {initial_recon:e}")]
    TrainingDiverged { initial_recon: f64, final_recon: f64 },

    #[error("decoded graph is degenerate: all decoded tokens are identical")]
    DegenerateDecodedGraph,

    #[error("cannot split {distinct} distinct rows into {k} segments")]
    TooFewDistinctRows { k: usize, distinct: usize },

    #[error("comparison graph is disconnected: components {0:?}")]
    Disconnected(Vec<Vec<String>>),

    #[error("item {0} has no recorded comparisons")]
    UnobservedItem(String),

    #[error("realized-feature provider failed at every alpha")]
    ProviderExhausted,
}

impl VibeError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        VibeError::Invalid {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VibeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = VibeError> = std::result::Result<T, E>;
