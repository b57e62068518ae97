//! Generator, discriminator with a feature tap, Q head, and the losses tying them together.

pub mod gan;
pub mod latent;
pub mod losses;
pub mod network;
pub mod q_head;

pub use gan::{GanArchitecture, GanTriple};
pub use latent::{
    one_hot, sample_codes, CodeBatch, CodeSample, ContinuousPrior, LatentSpec, QOutput,
};
pub use network::{parse_layers, render_layers, BoundParams, LayerSpec, Mode, NetForward, Network};
pub use q_head::QHead;

use thiserror::Error;

use crate::autograd::AutogradError;
use crate::params::ParamError;
use crate::tensor::ShapeError;

/// Lower bound on every variance emitted by Q.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Raw log-variance is capped here before exponentiation.
pub const LOG_VARIANCE_CAP: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("no pending forward to backpropagate")]
    NoPendingForward,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

impl From<ShapeError> for ModelError {
    fn from(e: ShapeError) -> Self {
        ModelError::Shape(e.to_string())
    }
}
