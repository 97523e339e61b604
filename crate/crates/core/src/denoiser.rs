//! Iterative denoising: the time-unified loop with early termination, plus a
//! time-varying DDPM/DDIM baseline for iteration-count comparisons.
//!
//! The unified loop is the same for a trained network and for the analytic
//! field: predict a noise vector at the current action, subtract it, stop
//! when the update magnitude falls below `δ` or the iteration budget is
//! spent. The baseline instead runs a standard strided deterministic reverse
//! process over a cosine noise schedule, with the timestep embedded into the
//! network input.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::actionspace::{sample_demonstration, Action, Scene, Split, TaskSuite};
use crate::error::{CoreError, Result};
use crate::field::{unified_field, FieldParams};
use crate::nn::{HeadSpec, LossKind, LossSpec, LossTerm, Mlp, Sample, Workspace};
use crate::optim::AdamState;
use crate::rng::derive_rng;
use crate::training::{
    concat_input, drive_training, input_statistics, Checkpoint, CheckpointKind, DiffusionNet,
    TrainConfig, TrainRun, CHECKPOINT_FORMAT_VERSION,
};
use crate::vecmath::{all_finite, dist, norm};

/// Default early-termination threshold on the update magnitude.
pub const DEFAULT_DELTA: f64 = 0.01;

/// Record of one denoising episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    /// `y_0 … y_N`; `iterations_used = iterates.len() - 1`.
    pub iterates: Vec<Vec<f64>>,
    /// Update magnitudes `‖y_{t+1} - y_t‖`, one per applied update.
    pub dnorms: Vec<f64>,
    pub iterations_used: usize,
    pub terminated_early: bool,
    /// Final position plus the predicted (or oracle) open state.
    pub final_action: Action,
}

impl DenoiseTrace {
    pub fn final_pos(&self) -> &[f64] {
        &self.final_action.pos
    }
}

fn check_loop_params(n: usize, delta: f64) -> Result<()> {
    if n < 1 {
        return Err(CoreError::Config("denoise: N must be >= 1".into()));
    }
    if delta < 0.0 {
        return Err(CoreError::Config("denoise: delta must be >= 0".into()));
    }
    Ok(())
}

/// Shared unified-denoising loop. `delta = 0` disables early termination
/// (an update magnitude is never strictly below zero).
fn run_unified_loop(
    y0: &[f64],
    n: usize,
    delta: f64,
    mut predict: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, bool)> {
    check_loop_params(n, delta)?;
    let mut iterates = Vec::with_capacity(n + 1);
    let mut dnorms = Vec::with_capacity(n);
    iterates.push(y0.to_vec());
    let mut terminated_early = false;
    for step in 0..n {
        let current = iterates.last().unwrap().clone();
        let eps = predict(&current)?;
        let next: Vec<f64> = current.iter().zip(&eps).map(|(y, e)| y - e).collect();
        if !all_finite(&next) {
            return Err(CoreError::NonFiniteIterate {
                step,
                trace_prefix: iterates,
            });
        }
        let dnorm = norm(&eps);
        iterates.push(next);
        dnorms.push(dnorm);
        if dnorm < delta {
            terminated_early = true;
            break;
        }
    }
    Ok((iterates, dnorms, terminated_early))
}

/// Time-unified iterative denoising with a trained diffusion network. The
/// final open state comes from the open head evaluated at the final iterate;
/// open states are never part of the iteration itself.
pub fn denoise(
    net: &DiffusionNet,
    context: &[f64],
    y0: &[f64],
    n: usize,
    delta: f64,
) -> Result<DenoiseTrace> {
    let mut ws = Workspace::new(&net.mlp);
    let (iterates, dnorms, terminated_early) = run_unified_loop(y0, n, delta, |y| {
        net.predict_ws(context, y, &mut ws)?;
        Ok(ws.output[..net.d].to_vec())
    })?;
    let final_pos = iterates.last().unwrap().clone();
    net.predict_ws(context, &final_pos, &mut ws)?;
    let open = ws.output[net.d];
    Ok(DenoiseTrace {
        iterations_used: iterates.len() - 1,
        terminated_early,
        final_action: Action::new(final_pos, open),
        iterates,
        dnorms,
    })
}

/// The same loop driven by the analytic unified field; the test harness for
/// convergence claims. The oracle knows the ground truth, so the final open
/// state is the nearest mode's open bit.
pub fn denoise_oracle(
    scene: &Scene,
    y0: &[f64],
    p: &FieldParams,
    n: usize,
    delta: f64,
) -> Result<DenoiseTrace> {
    let (iterates, dnorms, terminated_early) =
        run_unified_loop(y0, n, delta, |y| Ok(unified_field(y, scene, p)))?;
    let final_pos = iterates.last().unwrap().clone();
    let nearest = scene
        .modes
        .iter()
        .min_by(|a, b| {
            dist(&final_pos, &a.pos)
                .partial_cmp(&dist(&final_pos, &b.pos))
                .unwrap()
        })
        .expect("scene has modes");
    Ok(DenoiseTrace {
        iterations_used: iterates.len() - 1,
        terminated_early,
        final_action: Action::new(final_pos, nearest.open),
        iterates,
        dnorms,
    })
}

/// Initial noisy action: standard normal per coordinate, not clipped to the
/// workspace, so far-field behavior stays visible.
pub fn sample_initial(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// Time-varying baseline
// ---------------------------------------------------------------------------

/// Cosine ᾱ schedule for the DDPM-style baseline, with per-step βs clipped
/// at 0.999.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSchedule {
    pub timesteps: usize,
    /// `alpha_bar[t]` for `t = 0..=timesteps`; `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// Width of the sinusoidal timestep embedding (even).
    pub t_embed: usize,
}

impl BaselineSchedule {
    pub fn cosine(timesteps: usize, t_embed: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| {
            let x = (t / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos() * x.cos()
        };
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=timesteps {
            let beta = (1.0 - f(t as f64) / f((t - 1) as f64)).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self {
            timesteps,
            alpha_bar,
            t_embed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(CoreError::Config("baseline.timesteps must be >= 1".into()));
        }
        if self.alpha_bar.len() != self.timesteps + 1 {
            return Err(CoreError::Config("baseline schedule length mismatch".into()));
        }
        if self.t_embed == 0 || self.t_embed % 2 != 0 {
            return Err(CoreError::Config("baseline.t_embed must be even and > 0".into()));
        }
        for w in self.alpha_bar.windows(2) {
            if !(w[1] < w[0]) {
                return Err(CoreError::Config(
                    "baseline schedule must strictly lose signal per step".into(),
                ));
            }
        }
        Ok(())
    }

    /// Sinusoidal embedding of a timestep: `sin/cos(2π · t/T · 2^j)` pairs.
    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let t_norm = t as f64 / self.timesteps as f64;
        let mut out = Vec::with_capacity(self.t_embed);
        for j in 0..self.t_embed / 2 {
            let angle = 2.0 * std::f64::consts::PI * t_norm * (1 << j) as f64;
            out.push(angle.sin());
            out.push(angle.cos());
        }
        out
    }
}

/// Trained time-varying baseline: input `[context, y, t-embedding]`, noise
/// and open heads.
#[derive(Debug, Clone)]
pub struct BaselineNet {
    pub mlp: Mlp,
    pub d: usize,
    pub schedule: BaselineSchedule,
}

impl Checkpoint {
    pub fn to_baseline_net(&self, d: usize) -> Result<BaselineNet> {
        self.expect_kind(CheckpointKind::Baseline)?;
        let schedule = self
            .schedule
            .clone()
            .ok_or_else(|| CoreError::Config("baseline checkpoint lacks a schedule".into()))?;
        Ok(BaselineNet {
            mlp: self.mlp.clone(),
            d,
            schedule,
        })
    }
}

impl BaselineNet {
    fn input(&self, context: &[f64], y: &[f64], t: usize) -> Vec<f64> {
        let temb = self.schedule.time_embedding(t);
        let mut input = Vec::with_capacity(context.len() + y.len() + temb.len());
        input.extend_from_slice(context);
        input.extend_from_slice(y);
        input.extend_from_slice(&temb);
        input
    }

    /// Predicted noise and open probability at `(context, y, t)`.
    pub fn predict(&self, context: &[f64], y: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        let mut ws = Workspace::new(&self.mlp);
        self.mlp.forward_ws(&self.input(context, y, t), &mut ws)?;
        Ok((ws.output[..self.d].to_vec(), ws.output[self.d]))
    }
}

/// Trains (or resumes) the DDPM-style baseline: sample a timestep uniformly,
/// noise the label action along the schedule, and regress the noise head on
/// the injected Gaussian noise.
pub fn train_baseline(
    suite: &TaskSuite,
    cfg: &TrainConfig,
    schedule: &BaselineSchedule,
    resume: Option<Checkpoint>,
    halt_after: Option<u64>,
) -> Result<TrainRun> {
    schedule.validate()?;
    let scenes: Vec<&Scene> = suite.scenes_in(Split::Train).collect();
    if scenes.is_empty() {
        return Err(CoreError::Config("suite has no train split".into()));
    }
    let signature = suite.signature();
    let d = suite.d();

    let (mlp, adam, start_step, cfg, schedule) = match resume {
        Some(ckpt) => {
            ckpt.expect_kind(CheckpointKind::Baseline)?;
            ckpt.expect_suite(suite)?;
            let sched = ckpt
                .schedule
                .clone()
                .ok_or_else(|| CoreError::Config("baseline checkpoint lacks a schedule".into()))?;
            let start = ckpt.trained_steps;
            (ckpt.mlp, ckpt.adam, start, ckpt.train_config, sched)
        }
        None => {
            let input_dim = suite.context_dim() + d + schedule.t_embed;
            let mut dims = vec![input_dim];
            dims.extend_from_slice(&cfg.hidden);
            dims.push(d + 1);
            let heads = vec![HeadSpec::linear("noise", d), HeadSpec::sigmoid("open", 1)];
            let mut mlp = Mlp::new(dims, cfg.activation, heads);
            mlp.init_hidden(&mut derive_rng(cfg.seed, "train/baseline/init", &[]));
            let mut stat_rng = derive_rng(cfg.seed, "train/baseline/stats", &[]);
            let sched = schedule.clone();
            let (mean, std) = input_statistics(input_dim, 2048, |_| {
                let scene = scenes[stat_rng.random_range(0..scenes.len())];
                let demo = sample_demonstration(scene, &mut stat_rng);
                let t = stat_rng.random_range(1..=sched.timesteps);
                let ab = sched.alpha_bar[t];
                let noisy: Vec<f64> = demo
                    .label
                    .pos
                    .iter()
                    .map(|&p| {
                        ab.sqrt() * p
                            + (1.0 - ab).sqrt() * stat_rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                let mut input = concat_input(&scene.context, &noisy);
                input.extend_from_slice(&sched.time_embedding(t));
                input
            });
            mlp.set_normalization(mean, std);
            let adam = AdamState::new(&mlp);
            (mlp, adam, 0, cfg.clone(), schedule.clone())
        }
    };

    let loss_spec = LossSpec {
        terms: vec![
            LossTerm {
                head: 0,
                kind: cfg.loss_norm.loss_kind(),
                weight: 1.0,
            },
            LossTerm {
                head: 1,
                kind: LossKind::Bce,
                weight: cfg.w_open,
            },
        ],
    };
    let seed = cfg.seed;
    let sched = schedule.clone();
    let scenes_ref = &scenes;
    let stop_step = halt_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let (mlp, adam, log) = drive_training(
        mlp,
        adam,
        start_step,
        stop_step,
        &cfg,
        &loss_spec,
        move |step, batch| {
            let mut rng = derive_rng(seed, "train/baseline/step", &[step]);
            for _ in 0..cfg.batch_size {
                let scene = scenes_ref[rng.random_range(0..scenes_ref.len())];
                let demo = sample_demonstration(scene, &mut rng);
                let t = rng.random_range(1..=sched.timesteps);
                let ab = sched.alpha_bar[t];
                let eps: Vec<f64> = (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let noisy: Vec<f64> = demo
                    .label
                    .pos
                    .iter()
                    .zip(&eps)
                    .map(|(&p, &e)| ab.sqrt() * p + (1.0 - ab).sqrt() * e)
                    .collect();
                let mut input = concat_input(&scene.context, &noisy);
                input.extend_from_slice(&sched.time_embedding(t));
                batch.push(Sample {
                    input,
                    targets: vec![eps, vec![demo.label.open]],
                    weight: 1.0,
                });
            }
            Ok(())
        },
    )?;

    Ok(TrainRun {
        checkpoint: Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            tool: crate::TOOL_VERSION.to_string(),
            kind: CheckpointKind::Baseline,
            suite_signature: signature,
            rng_seed: cfg.seed,
            trained_steps: stop_step.max(start_step),
            train_config: cfg,
            field: None,
            mlp,
            adam,
            schedule: Some(schedule),
        },
        log,
    })
}

/// Evenly strided timesteps from `T` down to 0 inclusive, `iterations + 1`
/// points. `iterations = T` walks the full chain; `iterations = 1` is a
/// single jump.
pub fn strided_timesteps(t_total: usize, iterations: usize) -> Vec<usize> {
    (0..=iterations)
        .map(|j| {
            (t_total as f64 * (1.0 - j as f64 / iterations as f64)).round() as usize
        })
        .collect()
}

/// Deterministic (η = 0) strided reverse process. The predicted clean action
/// is clamped to the workspace guard band before re-noising, which keeps the
/// first jumps finite when the signal level at `t = T` is vanishingly small.
pub fn denoise_baseline(
    net: &BaselineNet,
    context: &[f64],
    y0: &[f64],
    iterations: usize,
) -> Result<DenoiseTrace> {
    let t_total = net.schedule.timesteps;
    if iterations < 1 || iterations > t_total {
        return Err(CoreError::Config(format!(
            "baseline iterations must lie in [1, {t_total}], got {iterations}"
        )));
    }
    let taus = strided_timesteps(t_total, iterations);
    let mut ws = Workspace::new(&net.mlp);
    let mut iterates = vec![y0.to_vec()];
    let mut dnorms = Vec::with_capacity(iterations);
    let mut last_open = 0.5;
    let clamp = 2.5;
    for (step, pair) in taus.windows(2).enumerate() {
        let (t, t_next) = (pair[0], pair[1]);
        let current = iterates.last().unwrap().clone();
        net.mlp.forward_ws(&net.input(context, &current, t), &mut ws)?;
        let eps = &ws.output[..net.d];
        last_open = ws.output[net.d];
        let ab = net.schedule.alpha_bar[t];
        let ab_next = net.schedule.alpha_bar[t_next];
        let x0: Vec<f64> = current
            .iter()
            .zip(eps)
            .map(|(x, e)| ((x - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-clamp, clamp))
            .collect();
        let next: Vec<f64> = x0
            .iter()
            .zip(eps)
            .map(|(x0i, e)| ab_next.sqrt() * x0i + (1.0 - ab_next).sqrt() * e)
            .collect();
        if !all_finite(&next) {
            return Err(CoreError::NonFiniteIterate {
                step,
                trace_prefix: iterates,
            });
        }
        dnorms.push(dist(&next, &current));
        iterates.push(next);
    }
    let final_pos = iterates.last().unwrap().clone();
    Ok(DenoiseTrace {
        iterations_used: iterates.len() - 1,
        terminated_early: false,
        final_action: Action::new(final_pos, last_open),
        iterates,
        dnorms,
    })
}
