//! Closed-form velocity fields over action space.
//!
//! These are the analytic ground truth the networks are trained toward and
//! tested against. The central object is the time-unified field: a single
//! noise-prediction field `ε(y)` that is constant across denoising
//! iterations. It is assembled from per-mode conditional velocities capped at
//! magnitude `v`, gated by a binary correlation weight `λ` that zeroes a
//! mode's pull inside other modes' neighborhoods, and merged across modes
//! with Gaussian sampling densities.
//!
//! Two merge rules are provided. `Posterior` normalizes the density weights
//! to sum to one; it is the exact minimizer of the squared training loss, so
//! trained networks are compared against it. `Literal` keeps the raw
//! density-weighted average (weights `p(y|ŷ^i)/k` without normalization).

use serde::{Deserialize, Serialize};

use crate::actionspace::Scene;
use crate::error::{CoreError, Result};
use crate::vecmath::{dist, norm, sub};

/// How per-mode conditional fields are merged into one field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeForm {
    /// Raw density-weighted sum `Σ_i (1/k) p(y|ŷ^i) λ_i ε_i`.
    Literal,
    /// Posterior-normalized sum `Σ_i w_i λ_i ε_i`, `w_i ∝ p(y|ŷ^i)`.
    Posterior,
}

impl std::fmt::Display for MergeForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MergeForm::Literal => write!(f, "literal"),
            MergeForm::Posterior => write!(f, "posterior"),
        }
    }
}

/// Analytic field hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Velocity limitation: maximum conditional-step magnitude.
    pub v: f64,
    /// Neighborhood radius of successful actions.
    pub l: f64,
    /// Standard deviation of the noisy-action sampling distribution.
    pub sigma: f64,
    /// Score-label decay exponent; should stay at or below -10.
    pub m_exp: f64,
    pub form: MergeForm,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            v: 0.5,
            l: 0.1,
            sigma: 0.5,
            m_exp: -10.0,
            form: MergeForm::Posterior,
        }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v > 0.0) {
            return Err(CoreError::Config("field.v must be > 0".into()));
        }
        if !(self.l > 0.0) {
            return Err(CoreError::Config("field.l must be > 0".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(CoreError::Config("field.sigma must be > 0".into()));
        }
        if self.l > self.v {
            return Err(CoreError::Config(format!(
                "field.l={} must not exceed field.v={} (one-step neighborhood convergence)",
                self.l, self.v
            )));
        }
        if self.m_exp > -10.0 {
            log::warn!(
                "field.m_exp={} is above -10; score labels decay slowly outside neighborhoods",
                self.m_exp
            );
        }
        Ok(())
    }
}

/// Conditional velocity toward one successful action, capped at magnitude
/// `v`: `v · (y-ŷ) / max(v, ‖y-ŷ‖)`. Equals `y-ŷ` exactly whenever
/// `‖y-ŷ‖ <= v`.
pub fn conditional_velocity(y: &[f64], y_hat: &[f64], v: f64) -> Vec<f64> {
    let mut diff = sub(y, y_hat);
    let r = norm(&diff);
    let scale = v / v.max(r);
    if scale != 1.0 {
        for x in &mut diff {
            *x *= scale;
        }
    }
    diff
}

/// Binary correlation weight of mode `i` at `y`: zero iff `y` lies within
/// radius `l` of some other mode. For a single-mode scene the minimum over an
/// empty set is `+inf`, so the weight is always one.
pub fn correlation_weight(y: &[f64], i: usize, scene: &Scene, l: f64) -> f64 {
    let mut nearest_other = f64::INFINITY;
    for (j, mode) in scene.modes.iter().enumerate() {
        if j != i {
            nearest_other = nearest_other.min(dist(y, &mode.pos));
        }
    }
    if nearest_other <= l {
        0.0
    } else {
        1.0
    }
}

/// Posterior weights `w_i = p(y|ŷ^i) / Σ_j p(y|ŷ^j)` for uniform mode priors,
/// computed in log space with max-subtraction so distant modes never
/// underflow the normalization.
pub fn posterior_weights(y: &[f64], scene: &Scene, sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let log_p: Vec<f64> = scene
        .modes
        .iter()
        .map(|m| {
            let r = dist(y, &m.pos);
            -r * r * inv
        })
        .collect();
    let max = log_p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_p.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Full-dimensional Gaussian density `p(y|ŷ) = (2πσ²)^{-d/2} e^{-r²/(2σ²)}`.
fn gaussian_density(r: f64, sigma: f64, d: usize) -> f64 {
    let var = sigma * sigma;
    let norm_const = (2.0 * std::f64::consts::PI * var).powf(-(d as f64) / 2.0);
    norm_const * (-r * r / (2.0 * var)).exp()
}

fn merged_field(y: &[f64], scene: &Scene, p: &FieldParams, use_lambda: bool) -> Vec<f64> {
    let d = y.len();
    let k = scene.modes.len();
    let mut out = vec![0.0; d];
    match p.form {
        MergeForm::Posterior => {
            let weights = posterior_weights(y, scene, p.sigma);
            for (i, mode) in scene.modes.iter().enumerate() {
                let lambda = if use_lambda {
                    correlation_weight(y, i, scene, p.l)
                } else {
                    1.0
                };
                if lambda == 0.0 || weights[i] == 0.0 {
                    continue;
                }
                let eps = conditional_velocity(y, &mode.pos, p.v);
                for (o, e) in out.iter_mut().zip(&eps) {
                    *o += weights[i] * lambda * e;
                }
            }
        }
        MergeForm::Literal => {
            // Raw densities; if every term underflows to zero the field is
            // the zero vector, which is the documented far-field behavior.
            for (i, mode) in scene.modes.iter().enumerate() {
                let lambda = if use_lambda {
                    correlation_weight(y, i, scene, p.l)
                } else {
                    1.0
                };
                if lambda == 0.0 {
                    continue;
                }
                let density = gaussian_density(dist(y, &mode.pos), p.sigma, d);
                if density == 0.0 {
                    continue;
                }
                let eps = conditional_velocity(y, &mode.pos, p.v);
                let w = density / k as f64;
                for (o, e) in out.iter_mut().zip(&eps) {
                    *o += w * lambda * e;
                }
            }
        }
    }
    out
}

/// The time-unified velocity field: λ-gated conditional velocities merged
/// over modes. Vanishes exactly at every mode.
pub fn unified_field(y: &[f64], scene: &Scene, p: &FieldParams) -> Vec<f64> {
    merged_field(y, scene, p, true)
}

/// The λ-free merged field. With two or more modes it keeps a non-zero pull
/// at the modes themselves, which is exactly the bias the correlation weight
/// removes.
pub fn unweighted_field(y: &[f64], scene: &Scene, p: &FieldParams) -> Vec<f64> {
    merged_field(y, scene, p, false)
}

/// Score label `ŝ(y, ŷ) = e^{m · ReLU(‖y-ŷ‖ - l)}`: one on and inside the
/// neighborhood boundary, decaying smoothly outside.
pub fn score_label(y: &[f64], y_hat: &[f64], l: f64, m_exp: f64) -> f64 {
    let excess = (dist(y, y_hat) - l).max(0.0);
    (m_exp * excess).exp()
}

/// Posterior-weighted mean of the score label over modes. This is the value
/// a score network trained with squared loss converges to, so it serves as
/// the analytic target for phase-1 training.
pub fn bayes_score(y: &[f64], scene: &Scene, p: &FieldParams) -> f64 {
    let weights = posterior_weights(y, scene, p.sigma);
    scene
        .modes
        .iter()
        .zip(&weights)
        .map(|(m, w)| w * score_label(y, &m.pos, p.l, p.m_exp))
        .sum()
}

/// Per-mode field magnitudes at the modes themselves, for the λ-free and
/// λ-gated fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub mode: usize,
    pub unweighted: f64,
    pub unified: f64,
}

/// Evaluates both merged fields at every mode of the scene. The unified
/// column is exactly zero; the unweighted column is strictly positive
/// whenever the scene has two or more modes at finite distance.
pub fn field_bias_report(scene: &Scene, p: &FieldParams) -> Vec<BiasEntry> {
    scene
        .modes
        .iter()
        .enumerate()
        .map(|(i, mode)| BiasEntry {
            mode: i,
            unweighted: norm(&unweighted_field(&mode.pos, scene, p)),
            unified: norm(&unified_field(&mode.pos, scene, p)),
        })
        .collect()
}
