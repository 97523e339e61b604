//! Adam optimizer and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Mlp, ParamVec};

/// Adam moment accumulators shaped like the network they optimize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ParamVec,
    pub v: ParamVec,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(mlp: &Mlp) -> Self {
        Self {
            m: ParamVec::zeros_like(mlp),
            v: ParamVec::zeros_like(mlp),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Fails if any parameter leaves the
/// finite range.
pub fn adam_step(
    mlp: &mut Mlp,
    grads: &ParamVec,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    for layer in 0..mlp.weights.len() {
        update_slice(
            &mut mlp.weights[layer],
            &grads.weights[layer],
            &mut state.m.weights[layer],
            &mut state.v.weights[layer],
            lr,
            b1,
            b2,
            eps,
            bc1,
            bc2,
        )
        .map_err(|index| CoreError::NonFiniteUpdate { layer, index })?;
        update_slice(
            &mut mlp.biases[layer],
            &grads.biases[layer],
            &mut state.m.biases[layer],
            &mut state.v.biases[layer],
            lr,
            b1,
            b2,
            eps,
            bc1,
            bc2,
        )
        .map_err(|index| CoreError::NonFiniteUpdate { layer, index })?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) -> std::result::Result<(), usize> {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        if !params[i].is_finite() {
            return Err(i);
        }
    }
    Ok(())
}

/// Cosine decay: `base · 0.5 · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: u64, total: u64, base: f64) -> f64 {
    debug_assert!(step <= total, "step {step} past schedule end {total}");
    let ratio = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, HeadSpec};

    fn one_param_net(weight: f64) -> Mlp {
        let mut mlp = Mlp::new(
            vec![1, 1],
            Activation::Relu,
            vec![HeadSpec::linear("out", 1)],
        );
        mlp.weights[0][0] = weight;
        mlp
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut mlp = one_param_net(0.75);
        let mut state = AdamState::new(&mlp);
        state.m.weights[0][0] = 0.5;
        state.v.weights[0][0] = 0.25;
        let zero = ParamVec::zeros_like(&mlp);
        // From a fresh state the update is exactly zero; with warm moments it
        // still decays them toward zero.
        let mut fresh = one_param_net(0.75);
        let mut fresh_state = AdamState::new(&fresh);
        adam_step(&mut fresh, &zero, &mut fresh_state, 1e-3).unwrap();
        assert_eq!(fresh.weights[0][0], 0.75);

        let m0 = state.m.weights[0][0];
        let v0 = state.v.weights[0][0];
        adam_step(&mut mlp, &zero, &mut state, 1e-3).unwrap();
        assert!(state.m.weights[0][0].abs() < m0.abs());
        assert!(state.v.weights[0][0].abs() < v0.abs());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn lr_zero_leaves_params() {
        let mut mlp = one_param_net(0.3);
        let mut state = AdamState::new(&mlp);
        let mut grads = ParamVec::zeros_like(&mlp);
        grads.weights[0][0] = 1.7;
        adam_step(&mut mlp, &grads, &mut state, 0.0).unwrap();
        assert_eq!(mlp.weights[0][0], 0.3);
        assert_eq!(state.step, 1);
    }

    /// Independent 1-D scalar simulation of Adam, written directly from the
    /// update equations; the oracle for the network-shaped implementation.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: u64,
    }

    impl ScalarAdam {
        fn step(&mut self, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let m_hat = self.m / (1.0 - 0.9f64.powf(self.t as f64));
            let v_hat = self.v / (1.0 - 0.999f64.powf(self.t as f64));
            -lr * m_hat / (v_hat.sqrt() + 1e-8)
        }
    }

    #[test]
    fn constant_gradient_matches_scalar_oracle_and_unit_step() {
        let mut mlp = one_param_net(0.0);
        let mut state = AdamState::new(&mlp);
        let mut grads = ParamVec::zeros_like(&mlp);
        grads.weights[0][0] = 0.37;
        let lr = 1e-3;

        let mut oracle = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        let mut oracle_param = 0.0f64;
        let mut last_step = 0.0f64;
        for _ in 0..500 {
            let before = mlp.weights[0][0];
            adam_step(&mut mlp, &grads, &mut state, lr).unwrap();
            last_step = mlp.weights[0][0] - before;
            oracle_param += oracle.step(0.37, lr);
            assert!((mlp.weights[0][0] - oracle_param).abs() < 1e-15);
        }
        // Adam's unit-step property: with a constant gradient the
        // per-coordinate step magnitude approaches lr.
        assert!((last_step.abs() - lr).abs() < 1e-6 * lr.max(1.0));
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut mlp = one_param_net(f64::MAX);
        let mut state = AdamState::new(&mlp);
        let mut grads = ParamVec::zeros_like(&mlp);
        grads.weights[0][0] = -1.0;
        let mut failed = false;
        for _ in 0..10_000 {
            if let Err(CoreError::NonFiniteUpdate { layer, index }) =
                adam_step(&mut mlp, &grads, &mut state, f64::MAX / 4.0)
            {
                assert_eq!((layer, index), (0, 0));
                failed = true;
                break;
            }
        }
        assert!(failed, "overflow never detected");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let base = 1e-4;
        assert_eq!(cosine_lr(0, 40_000, base), base);
        assert!((cosine_lr(20_000, 40_000, base) - 0.5 * base).abs() < 1e-18);
        assert!(cosine_lr(40_000, 40_000, base).abs() < 1e-19);
        // Monotone decay.
        let mut prev = f64::INFINITY;
        for step in (0..=40_000).step_by(1_000) {
            let lr = cosine_lr(step, 40_000, base);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
