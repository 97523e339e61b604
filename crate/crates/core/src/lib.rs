//! Desk-scale laboratory for time-unified velocity-field diffusion policies.
//!
//! The crate builds a single noise-prediction field over action space that is
//! constant across denoising iterations, together with everything needed to
//! train and interrogate it:
//!
//! * [`actionspace`] — synthetic multi-modal action-generation tasks (scenes
//!   with several ground-truth successful actions) and demonstration sampling.
//! * [`field`] — closed-form velocity fields, correlation weights, and score
//!   labels; the analytic ground truth that trained networks are tested against.
//! * [`nn`] / [`optim`] — a minimal fully-connected stack with exact
//!   reverse-mode gradients, Adam, and cosine learning-rate decay.
//! * [`training`] — the two-phase action-wise procedure: fit the action score
//!   network first, then the unified diffusion network with score-gated targets.
//! * [`denoiser`] — early-terminating iterative denoising plus a time-varying
//!   DDPM/DDIM baseline for iteration sweeps.
//! * [`evaluation`] — success-rate reports, paired iteration sweeps, field
//!   heatmaps, and hyperparameter ablations with CSV/PGM export.
//! * [`config`] — the flat `section.key = value` run configuration shared by
//!   the CLI and the test harness.
//! * [`check`] — the standing verification battery (gradient checks, field
//!   fixed points, one-step convergence, bias contrast).

pub mod actionspace;
pub mod check;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod training;
pub mod vecmath;

pub use error::CoreError;

/// Crate version string stamped into artifact headers.
pub const TOOL_VERSION: &str = concat!("unifield-", env!("CARGO_PKG_VERSION"));
