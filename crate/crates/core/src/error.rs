use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the mask-adapter pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask {index} is empty")]
    EmptyMask { index: usize },

    #[error("mask perturbation could not reach IoU band [{lo:.3}, {hi:.3}] within {budget} flips")]
    PerturbBudget { lo: f64, hi: f64, budget: usize },

    #[error("non-finite value after {stage}")]
    NonFinite { stage: String },

    #[error("invalid activation stack: {0}")]
    InvalidActivations(String),

    #[error("embeddings are not L2-normalized")]
    NotNormalized,

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
