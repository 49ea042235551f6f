// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout `gae_core`.
pub type Result<T> = std::result::Result<T, GaeError>;

#[derive(Debug, Error)]
pub enum GaeError {
    #[error("empty batch: at least one row is required")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "code Gram matrix B is singular (centered codes are rank deficient); \
         raise lambda_pres above zero"
    )]
    SingularGram,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GaeError {
    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        GaeError::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
