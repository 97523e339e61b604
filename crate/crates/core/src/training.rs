//! Two-phase action-wise training.
//!
//! Phase 1 fits the action discrimination (score) network: given a context
//! and a noisy action it predicts how close the action is to a successful
//! one, supervised by the exponential score label. Phase 2 fits the unified
//! diffusion network on λ-gated conditional velocities, where λ comes from
//! the trained score network (or, for controlled experiments, from the
//! ground-truth correlation weight, or is pinned to 1 to disable gating).
//!
//! Both phases share one driver: per-step derived random streams make every
//! run resumable and bit-reproducible.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actionspace::{sample_demonstration, sample_noisy_action, Scene, Split, TaskSuite};
use crate::denoiser::BaselineSchedule;
use crate::error::{CoreError, Result};
use crate::field::{conditional_velocity, correlation_weight, score_label, FieldParams};
use crate::nn::{
    grad, Activation, HeadSpec, LossKind, LossSpec, LossTerm, Mlp, Sample, Workspace,
};
use crate::optim::{adam_step, cosine_lr, AdamState};
use crate::rng::derive_rng;

/// Norm applied to the score and action regression residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Squared Euclidean norm; its minimizer is the posterior mean, which is
    /// what the analytic oracles compute, so this is the default.
    Squared,
    /// Plain Euclidean norm.
    Unsquared,
}

impl LossNorm {
    pub fn loss_kind(self) -> LossKind {
        match self {
            LossNorm::Squared => LossKind::SquaredL2,
            LossNorm::Unsquared => LossKind::L2,
        }
    }
}

/// Source of the correlation weight during phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Approximate λ from the trained score network.
    Score,
    /// Ground-truth binary λ from the scene's mode set.
    Oracle,
    /// λ ≡ 1: disables action-wise gating (the ablation baseline).
    One,
}

impl std::fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LambdaMode::Score => write!(f, "score"),
            LambdaMode::Oracle => write!(f, "oracle"),
            LambdaMode::One => write!(f, "one"),
        }
    }
}

/// Hyperparameters shared by both training phases and the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// Maximum training rounds per phase.
    pub total_steps: u64,
    pub seed: u64,
    pub loss_norm: LossNorm,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Weight of the gripper-opening loss in phase 2.
    pub w_open: f64,
    pub lambda_mode: LambdaMode,
    /// Clamp the approximated λ to [0, 1]; the raw formula reaches 2 inside
    /// the label's own neighborhood.
    pub lambda_clamp: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: 1e-4,
            total_steps: 40_000,
            seed: 0,
            loss_norm: LossNorm::Squared,
            hidden: vec![256, 256, 256],
            activation: Activation::Relu,
            w_open: 0.4,
            lambda_mode: LambdaMode::Score,
            lambda_clamp: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(CoreError::Config("train.batch_size must be >= 1".into()));
        }
        if self.total_steps < 1 {
            return Err(CoreError::Config("train.steps must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(CoreError::Config("train.base_lr must be > 0".into()));
        }
        if self.w_open < 0.0 {
            return Err(CoreError::Config("train.w_open must be >= 0".into()));
        }
        if self.workers < 1 {
            return Err(CoreError::Config("train.workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training-log entry; serialized as `step,lr,loss,wall_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

// ---------------------------------------------------------------------------
// Loss formulas
// ---------------------------------------------------------------------------

/// Score regression loss: `|pred - target|` or its square.
pub fn score_loss(pred: f64, target: f64, norm: LossNorm) -> f64 {
    let diff = pred - target;
    match norm {
        LossNorm::Squared => diff * diff,
        LossNorm::Unsquared => diff.abs(),
    }
}

/// Gripper-opening loss: binary cross-entropy with the prediction clamped to
/// `[1e-7, 1-1e-7]` before taking logs.
pub fn open_loss(pred_open: f64, label_open: f64) -> f64 {
    let p = pred_open.clamp(crate::nn::BCE_CLAMP, 1.0 - crate::nn::BCE_CLAMP);
    -(label_open * p.ln() + (1.0 - label_open) * (1.0 - p).ln())
}

/// Action regression loss: `‖net_noise - target_noise‖` or its square.
pub fn action_loss(net_noise: &[f64], target_noise: &[f64], norm: LossNorm) -> f64 {
    let sq: f64 = net_noise
        .iter()
        .zip(target_noise)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    match norm {
        LossNorm::Squared => sq,
        LossNorm::Unsquared => sq.sqrt(),
    }
}

/// Phase-2 objective: action term plus weighted opening term.
pub fn noise_loss(action_term: f64, open_term: f64, w_open: f64) -> f64 {
    action_term + w_open * open_term
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

/// Trained action discrimination network: input `[context, y]`, one sigmoid
/// score head.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    pub mlp: Mlp,
}

impl ScoreNet {
    pub fn score(&self, context: &[f64], y: &[f64]) -> Result<f64> {
        let mut ws = Workspace::new(&self.mlp);
        self.score_ws(context, y, &mut ws)
    }

    pub fn score_ws(&self, context: &[f64], y: &[f64], ws: &mut Workspace) -> Result<f64> {
        let input = concat_input(context, y);
        self.mlp.forward_ws(&input, ws)?;
        Ok(ws.output[0])
    }
}

/// Trained unified diffusion network: input `[context, y]`, a linear noise
/// head of width `d` and a sigmoid open head of width 1.
#[derive(Debug, Clone)]
pub struct DiffusionNet {
    pub mlp: Mlp,
    pub d: usize,
}

impl DiffusionNet {
    /// Predicted noise vector and open probability at `(context, y)`.
    pub fn predict(&self, context: &[f64], y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut ws = Workspace::new(&self.mlp);
        self.predict_ws(context, y, &mut ws)?;
        Ok((ws.output[..self.d].to_vec(), ws.output[self.d]))
    }

    /// Workspace variant: afterwards `ws.output[..d]` is the noise and
    /// `ws.output[d]` the open probability.
    pub fn predict_ws(&self, context: &[f64], y: &[f64], ws: &mut Workspace) -> Result<()> {
        let input = concat_input(context, y);
        self.mlp.forward_ws(&input, ws)
    }
}

pub fn concat_input(context: &[f64], y: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(context.len() + y.len());
    input.extend_from_slice(context);
    input.extend_from_slice(y);
    input
}

/// Approximated correlation weight `λ = 1 - s_θ(x,y) · sgn(‖ŷ-y‖ - l)` with
/// `sgn(0) = 0`. With `clamp` the value is restricted to [0, 1], restoring
/// the range of the binary definition; the raw value is available with
/// `clamp = false`.
pub fn approx_correlation_weight(
    score_net: &ScoreNet,
    context: &[f64],
    y: &[f64],
    y_hat: &[f64],
    l: f64,
    clamp: bool,
) -> Result<f64> {
    let s = score_net.score(context, y)?;
    Ok(lambda_from_score(
        s,
        crate::vecmath::dist(y_hat, y),
        l,
        clamp,
    ))
}

pub(crate) fn lambda_from_score(s: f64, distance: f64, l: f64, clamp: bool) -> f64 {
    let excess = distance - l;
    let sgn = if excess > 0.0 {
        1.0
    } else if excess < 0.0 {
        -1.0
    } else {
        0.0
    };
    let lambda = 1.0 - s * sgn;
    if clamp {
        lambda.clamp(0.0, 1.0)
    } else {
        lambda
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Score,
    Diffusion,
    Baseline,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointKind::Score => write!(f, "score"),
            CheckpointKind::Diffusion => write!(f, "diffusion"),
            CheckpointKind::Baseline => write!(f, "baseline"),
        }
    }
}

/// Persistent network artifact: parameters, normalization statistics, the
/// optimizer state needed to resume, and the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tool: String,
    pub kind: CheckpointKind,
    pub suite_signature: String,
    pub rng_seed: u64,
    pub trained_steps: u64,
    pub train_config: TrainConfig,
    /// Field hyperparameters the targets were built from; absent on the
    /// baseline, which has no analytic field.
    pub field: Option<FieldParams>,
    pub mlp: Mlp,
    pub adam: AdamState,
    /// Present on baseline checkpoints only.
    pub schedule: Option<BaselineSchedule>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(CoreError::Config(format!(
                "expected a {kind} checkpoint, got {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn expect_suite(&self, suite: &TaskSuite) -> Result<()> {
        let signature = suite.signature();
        if self.suite_signature != signature {
            return Err(CoreError::SignatureMismatch {
                expected: self.suite_signature.clone(),
                got: signature,
            });
        }
        Ok(())
    }

    pub fn to_score_net(&self) -> Result<ScoreNet> {
        self.expect_kind(CheckpointKind::Score)?;
        Ok(ScoreNet {
            mlp: self.mlp.clone(),
        })
    }

    pub fn to_diffusion_net(&self, d: usize) -> Result<DiffusionNet> {
        self.expect_kind(CheckpointKind::Diffusion)?;
        Ok(DiffusionNet {
            mlp: self.mlp.clone(),
            d,
        })
    }
}

/// Outcome of a training call: the checkpoint plus the per-step log of the
/// steps executed in this call (empty when resuming a finished run).
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

// ---------------------------------------------------------------------------
// Shared driver
// ---------------------------------------------------------------------------

/// Per-coordinate mean/std of network inputs drawn by `sample_input`,
/// estimated from a fixed number of draws on a dedicated stream.
pub(crate) fn input_statistics(
    dim: usize,
    draws: usize,
    mut sample_input: impl FnMut(usize) -> Vec<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for i in 0..draws {
        let x = sample_input(i);
        for (j, v) in x.iter().enumerate() {
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let n = draws as f64;
    for j in 0..dim {
        mean[j] /= n;
        sq[j] = (sq[j] / n - mean[j] * mean[j]).max(0.0).sqrt();
    }
    (mean, sq)
}

/// Runs optimization rounds `start_step..stop_step` (the learning-rate
/// schedule always spans `cfg.total_steps`), deriving one random stream per
/// step so resumed runs replay identical draws.
pub(crate) fn drive_training(
    mut mlp: Mlp,
    mut adam: AdamState,
    start_step: u64,
    stop_step: u64,
    cfg: &TrainConfig,
    loss_spec: &LossSpec,
    mut fill_batch: impl FnMut(u64, &mut Vec<Sample>) -> Result<()> + Send,
) -> Result<(Mlp, AdamState, Vec<TrainLogRow>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| CoreError::Config(format!("worker pool: {e}")))?;
    pool.install(move || {
        let mut log = Vec::with_capacity(stop_step.saturating_sub(start_step) as usize);
        let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size);
        for step in start_step..stop_step {
            let t0 = Instant::now();
            batch.clear();
            fill_batch(step, &mut batch)?;
            let lr = cosine_lr(step, cfg.total_steps, cfg.base_lr);
            let (grads, loss) = grad(&mlp, &batch, loss_spec)?;
            adam_step(&mut mlp, &grads, &mut adam, lr)?;
            log.push(TrainLogRow {
                step,
                lr,
                loss,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok((mlp, adam, log))
    })
}

fn train_scenes(suite: &TaskSuite) -> Result<Vec<&Scene>> {
    let scenes: Vec<&Scene> = suite.scenes_in(Split::Train).collect();
    if scenes.is_empty() {
        return Err(CoreError::Config("suite has no train split".into()));
    }
    Ok(scenes)
}

const STAT_DRAWS: usize = 2048;

// ---------------------------------------------------------------------------
// Phase 1: action discrimination training
// ---------------------------------------------------------------------------

/// Trains (or resumes) the score network. Each round samples a scene and a
/// demonstration label, perturbs it into a noisy action, computes the
/// exponential score label, and regresses the sigmoid score head onto it.
///
/// `halt_after` checkpoints the run at that absolute step without touching
/// the learning-rate horizon, for later resumption.
pub fn train_score(
    suite: &TaskSuite,
    field: &FieldParams,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    halt_after: Option<u64>,
) -> Result<TrainRun> {
    field.validate()?;
    let scenes = train_scenes(suite)?;
    let signature = suite.signature();

    let (mlp, adam, start_step, cfg, field) = match resume {
        Some(ckpt) => {
            ckpt.expect_kind(CheckpointKind::Score)?;
            ckpt.expect_suite(suite)?;
            let field = ckpt
                .field
                .ok_or_else(|| CoreError::Config("score checkpoint lacks field params".into()))?;
            let start = ckpt.trained_steps;
            (ckpt.mlp, ckpt.adam, start, ckpt.train_config, field)
        }
        None => {
            let input_dim = suite.context_dim() + suite.d();
            let mut dims = vec![input_dim];
            dims.extend_from_slice(&cfg.hidden);
            dims.push(1);
            let mut mlp = Mlp::new(dims, cfg.activation, vec![HeadSpec::sigmoid("score", 1)]);
            mlp.init_hidden(&mut derive_rng(cfg.seed, "train/score/init", &[]));
            let mut stat_rng = derive_rng(cfg.seed, "train/score/stats", &[]);
            let (mean, std) = input_statistics(input_dim, STAT_DRAWS, |_| {
                let scene = scenes[stat_rng.random_range(0..scenes.len())];
                let demo = sample_demonstration(scene, &mut stat_rng);
                let noisy = sample_noisy_action(&demo.label, field.sigma, &mut stat_rng);
                concat_input(&scene.context, &noisy.pos)
            });
            mlp.set_normalization(mean, std);
            let adam = AdamState::new(&mlp);
            (mlp, adam, 0, cfg.clone(), *field)
        }
    };

    let loss_spec = LossSpec {
        terms: vec![LossTerm {
            head: 0,
            kind: cfg.loss_norm.loss_kind(),
            weight: 1.0,
        }],
    };
    let seed = cfg.seed;
    let stop_step = halt_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let (mlp, adam, log) = drive_training(
        mlp,
        adam,
        start_step,
        stop_step,
        &cfg,
        &loss_spec,
        |step, batch| {
            let mut rng = derive_rng(seed, "train/score/step", &[step]);
            for _ in 0..cfg.batch_size {
                let scene = scenes[rng.random_range(0..scenes.len())];
                let demo = sample_demonstration(scene, &mut rng);
                let noisy = sample_noisy_action(&demo.label, field.sigma, &mut rng);
                let target = score_label(&noisy.pos, &demo.label.pos, field.l, field.m_exp);
                batch.push(Sample {
                    input: concat_input(&scene.context, &noisy.pos),
                    targets: vec![vec![target]],
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
            kind: CheckpointKind::Score,
            suite_signature: signature,
            rng_seed: cfg.seed,
            trained_steps: stop_step.max(start_step),
            train_config: cfg,
            field: Some(field),
            mlp,
            adam,
            schedule: None,
        },
        log,
    })
}

// ---------------------------------------------------------------------------
// Phase 2: time-unified diffusion training
// ---------------------------------------------------------------------------

/// Trains (or resumes) the unified diffusion network. Each round samples a
/// noisy action, gates the conditional velocity toward its label by the
/// correlation weight, and regresses the noise head onto the gated target;
/// the open head is trained with cross-entropy on the label's open bit.
///
/// `score` is required in [`LambdaMode::Score`] and must come from phase 1 on
/// the same suite.
pub fn train_diffusion(
    suite: &TaskSuite,
    score: Option<&Checkpoint>,
    field: &FieldParams,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    halt_after: Option<u64>,
) -> Result<TrainRun> {
    field.validate()?;
    let scenes = train_scenes(suite)?;
    let signature = suite.signature();
    let d = suite.d();

    let score_net = match cfg.lambda_mode {
        LambdaMode::Score => {
            let ckpt = score.ok_or_else(|| {
                CoreError::Config("lambda_mode=score requires a score checkpoint".into())
            })?;
            ckpt.expect_suite(suite)?;
            Some(ckpt.to_score_net()?)
        }
        LambdaMode::Oracle | LambdaMode::One => None,
    };

    let (mlp, adam, start_step, cfg, field) = match resume {
        Some(ckpt) => {
            ckpt.expect_kind(CheckpointKind::Diffusion)?;
            ckpt.expect_suite(suite)?;
            let field = ckpt.field.ok_or_else(|| {
                CoreError::Config("diffusion checkpoint lacks field params".into())
            })?;
            let start = ckpt.trained_steps;
            (ckpt.mlp, ckpt.adam, start, ckpt.train_config, field)
        }
        None => {
            let input_dim = suite.context_dim() + d;
            let mut dims = vec![input_dim];
            dims.extend_from_slice(&cfg.hidden);
            dims.push(d + 1);
            let heads = vec![HeadSpec::linear("noise", d), HeadSpec::sigmoid("open", 1)];
            let mut mlp = Mlp::new(dims, cfg.activation, heads);
            mlp.init_hidden(&mut derive_rng(cfg.seed, "train/diffusion/init", &[]));
            let mut stat_rng = derive_rng(cfg.seed, "train/diffusion/stats", &[]);
            let (mean, std) = input_statistics(input_dim, STAT_DRAWS, |_| {
                let scene = scenes[stat_rng.random_range(0..scenes.len())];
                let demo = sample_demonstration(scene, &mut stat_rng);
                let noisy = sample_noisy_action(&demo.label, field.sigma, &mut stat_rng);
                concat_input(&scene.context, &noisy.pos)
            });
            mlp.set_normalization(mean, std);
            let adam = AdamState::new(&mlp);
            (mlp, adam, 0, cfg.clone(), *field)
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
    let lambda_mode = cfg.lambda_mode;
    let lambda_clamp = cfg.lambda_clamp;
    let field_copy = field;
    let stop_step = halt_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut score_ws = score_net.as_ref().map(|s| Workspace::new(&s.mlp));
    let (mlp, adam, log) = drive_training(
        mlp,
        adam,
        start_step,
        stop_step,
        &cfg,
        &loss_spec,
        move |step, batch| {
            let mut rng = derive_rng(seed, "train/diffusion/step", &[step]);
            for _ in 0..cfg.batch_size {
                let scene = scenes[rng.random_range(0..scenes.len())];
                let demo = sample_demonstration(scene, &mut rng);
                let noisy = sample_noisy_action(&demo.label, field_copy.sigma, &mut rng);
                let lambda = match lambda_mode {
                    LambdaMode::One => 1.0,
                    LambdaMode::Oracle => {
                        correlation_weight(&noisy.pos, demo.mode_index, scene, field_copy.l)
                    }
                    LambdaMode::Score => {
                        let net = score_net.as_ref().expect("checked above");
                        let ws = score_ws.as_mut().expect("workspace present");
                        let s = net.score_ws(&scene.context, &noisy.pos, ws)?;
                        lambda_from_score(
                            s,
                            crate::vecmath::dist(&demo.label.pos, &noisy.pos),
                            field_copy.l,
                            lambda_clamp,
                        )
                    }
                };
                let mut target = conditional_velocity(&noisy.pos, &demo.label.pos, field_copy.v);
                for t in &mut target {
                    *t *= lambda;
                }
                batch.push(Sample {
                    input: concat_input(&scene.context, &noisy.pos),
                    targets: vec![target, vec![demo.label.open]],
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
            kind: CheckpointKind::Diffusion,
            suite_signature: signature,
            rng_seed: cfg.seed,
            trained_steps: stop_step.max(start_step),
            train_config: cfg,
            field: Some(field),
            mlp,
            adam,
            schedule: None,
        },
        log,
    })
}

/// Writes a training log as `step,lr,loss,wall_ms` CSV under a provenance
/// header. With `include_timing = false` the wall column is written as zero
/// so reruns are byte-identical.
pub fn write_train_log(
    path: &std::path::Path,
    rows: &[TrainLogRow],
    header: &str,
    include_timing: bool,
) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    writeln!(out, "step,lr,loss,wall_ms")?;
    for row in rows {
        let wall = if include_timing { row.wall_ms } else { 0.0 };
        writeln!(out, "{},{},{},{:.3}", row.step, row.lr, row.loss, wall)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actionspace::{generate_suite, SuiteConfig};

    fn tiny_suite() -> TaskSuite {
        let cfg = SuiteConfig {
            d: 2,
            k_max: 2,
            train_scenes: 6,
            val_scenes: 2,
            test_scenes: 2,
            s_min: 0.25,
            context_map: false,
        };
        generate_suite(&cfg, 99).unwrap()
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            base_lr: 3e-3,
            total_steps: 50,
            seed: 5,
            hidden: vec![16, 16],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn score_loss_examples() {
        assert_eq!(score_loss(0.7, 0.7, LossNorm::Squared), 0.0);
        assert_eq!(score_loss(0.5, 1.0, LossNorm::Squared), 0.25);
        assert_eq!(score_loss(0.5, 1.0, LossNorm::Unsquared), 0.5);
    }

    #[test]
    fn open_loss_examples() {
        assert!((open_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(open_loss(1.0 - 1e-9, 1.0) < 1e-6);
        assert!((open_loss(0.9, 0.0) - 2.302_585_092_994_045_7).abs() < 1e-10);
    }

    #[test]
    fn action_loss_examples() {
        assert_eq!(action_loss(&[0.1, 0.2], &[0.1, 0.2], LossNorm::Squared), 0.0);
        let loss = action_loss(&[0.0, 0.0, 0.0], &[0.3, 0.4, 0.0], LossNorm::Squared);
        assert!((loss - 0.25).abs() < 1e-15);
        let loss = action_loss(&[0.0, 0.0, 0.0], &[0.3, 0.4, 0.0], LossNorm::Unsquared);
        assert!((loss - 0.5).abs() < 1e-15);
        // λ = 0 turns the target into the zero vector: any motion is
        // penalized.
        let gated = action_loss(&[0.2, 0.0, 0.0], &[0.0, 0.0, 0.0], LossNorm::Squared);
        assert!(gated > 0.0);
    }

    #[test]
    fn noise_loss_examples() {
        assert_eq!(noise_loss(0.7, 0.0, 0.4), 0.7);
        assert!((noise_loss(1.0, 0.5, 0.4) - 1.2).abs() < 1e-15);
        assert_eq!(noise_loss(0.9, 123.0, 0.0), 0.9);
    }

    #[test]
    fn lambda_formula_cases() {
        // s=1 outside the boundary: 1 - 1*(+1) = 0.
        assert_eq!(lambda_from_score(1.0, 0.5, 0.1, true), 0.0);
        // s=0 far from all modes: λ = 1.
        assert_eq!(lambda_from_score(0.0, 0.5, 0.1, true), 1.0);
        // Inside the label's own neighborhood the raw formula reaches 2.
        assert_eq!(lambda_from_score(1.0, 0.05, 0.1, false), 2.0);
        assert_eq!(lambda_from_score(1.0, 0.05, 0.1, true), 1.0);
        // sgn(0) = 0 keeps the boundary at λ = 1.
        assert_eq!(lambda_from_score(1.0, 0.1, 0.1, true), 1.0);
    }

    #[test]
    fn train_score_is_deterministic() {
        let suite = tiny_suite();
        let field = FieldParams::default();
        let cfg = tiny_train_config();
        let a = train_score(&suite, &field, &cfg, None, None).unwrap();
        let b = train_score(&suite, &field, &cfg, None, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.checkpoint).unwrap(),
            serde_json::to_string(&b.checkpoint).unwrap()
        );
        assert_eq!(a.log.len(), 50);
    }

    #[test]
    fn train_score_resume_matches_uninterrupted() {
        let suite = tiny_suite();
        let field = FieldParams::default();
        let cfg = tiny_train_config();

        let full = train_score(&suite, &field, &cfg, None, None).unwrap();

        let half = train_score(&suite, &field, &cfg, None, Some(20)).unwrap();
        assert_eq!(half.checkpoint.trained_steps, 20);
        let resumed = train_score(&suite, &field, &cfg, Some(half.checkpoint), None).unwrap();

        assert_eq!(full.checkpoint.mlp, resumed.checkpoint.mlp);
        assert_eq!(full.checkpoint.adam, resumed.checkpoint.adam);
        assert_eq!(resumed.log.len(), 30);
        assert_eq!(resumed.log[0].step, 20);
    }

    #[test]
    fn train_diffusion_requires_matching_score_suite() {
        let suite = tiny_suite();
        let other = generate_suite(&suite.config, 123).unwrap();
        let field = FieldParams::default();
        let cfg = tiny_train_config();
        let score = train_score(&suite, &field, &cfg, None, None).unwrap();
        match train_diffusion(&other, Some(&score.checkpoint), &field, &cfg, None, None) {
            Err(CoreError::SignatureMismatch { .. }) => {}
            other => panic!("expected signature mismatch, got {other:?}"),
        }
    }

    #[test]
    fn train_diffusion_smoke_and_determinism() {
        let suite = tiny_suite();
        let field = FieldParams::default();
        let cfg = tiny_train_config();
        let score = train_score(&suite, &field, &cfg, None, None).unwrap();
        let a = train_diffusion(&suite, Some(&score.checkpoint), &field, &cfg, None, None).unwrap();
        let b = train_diffusion(&suite, Some(&score.checkpoint), &field, &cfg, None, None).unwrap();
        assert_eq!(a.checkpoint.mlp, b.checkpoint.mlp);
        assert!(a.log.iter().all(|r| r.loss.is_finite()));
        let net = a.checkpoint.to_diffusion_net(suite.d()).unwrap();
        let scene = &suite.scenes[0];
        let (noise, open) = net.predict(&scene.context, &[0.2, 0.3]).unwrap();
        assert_eq!(noise.len(), 2);
        assert!((0.0..1.0).contains(&open));
    }

    #[test]
    fn oracle_lambda_mode_trains_without_score_net() {
        let suite = tiny_suite();
        let field = FieldParams::default();
        let mut cfg = tiny_train_config();
        cfg.lambda_mode = LambdaMode::Oracle;
        let run = train_diffusion(&suite, None, &field, &cfg, None, None).unwrap();
        assert_eq!(run.checkpoint.trained_steps, 50);
        cfg.lambda_mode = LambdaMode::Score;
        assert!(train_diffusion(&suite, None, &field, &cfg, None, None).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_kind_check() {
        let suite = tiny_suite();
        let field = FieldParams::default();
        let cfg = tiny_train_config();
        let run = train_score(&suite, &field, &cfg, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("score.ckpt.json");
        run.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(run.checkpoint, loaded);
        assert!(loaded.to_diffusion_net(2).is_err());
        assert!(loaded.to_score_net().is_ok());
    }

    #[test]
    fn score_training_reduces_loss() {
        let suite = tiny_suite();
        let field = FieldParams::default();
        let mut cfg = tiny_train_config();
        cfg.total_steps = 400;
        let run = train_score(&suite, &field, &cfg, None, None).unwrap();
        let head: f64 = run.log[..100].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        let tail: f64 = run.log[300..].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        assert!(
            tail < head,
            "no training progress: head {head}, tail {tail}"
        );
    }
}
