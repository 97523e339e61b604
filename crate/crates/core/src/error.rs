//! Shared error type for the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Scene generation could not satisfy the separation constraint.
    #[error(
        "infeasible scene generation: scene {scene} with k={k} modes, \
         s_min={s_min}, d={d} failed after {attempts} attempts"
    )]
    Infeasible {
        scene: u64,
        k: usize,
        s_min: f64,
        d: usize,
        attempts: usize,
    },

    /// Tensor/vector shape disagreement.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    /// A loss evaluated to a non-finite value.
    #[error("non-finite loss at batch sample {sample}")]
    NonFiniteLoss { sample: usize },

    /// An optimizer update produced a non-finite parameter.
    #[error("non-finite parameter after update in layer {layer} at index {index}")]
    NonFiniteUpdate { layer: usize, index: usize },

    /// A denoising iterate left the finite range; the trace prefix up to the
    /// failure is attached for post-mortem inspection.
    #[error("non-finite denoising iterate at step {step}")]
    NonFiniteIterate {
        step: usize,
        trace_prefix: Vec<Vec<f64>>,
    },

    /// Checkpoint consumed by a stage it was not trained for.
    #[error("suite signature mismatch: checkpoint was trained on {expected}, got {got}")]
    SignatureMismatch { expected: String, got: String },

    /// Evaluation invoked with no episodes to run.
    #[error("empty evaluation: {0}")]
    EmptyEval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
