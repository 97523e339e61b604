//! Actions, scenes, demonstrations, and the synthetic task generator.
//!
//! A scene stands in for a full observation: it carries a context vector (the
//! observation surrogate fed to networks) and a hidden list of `k` successful
//! actions ("modes"). Demonstrations pair a scene with one mode sampled
//! uniformly, mirroring imitation data where each example labels exactly one
//! of several valid actions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::rng::derive_rng;
use crate::vecmath::dist;

/// Placement attempts per scene before generation is declared infeasible.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// An end-effector action: a position in the normalized workspace plus a
/// gripper-open value. Ground-truth actions carry `open` of exactly 0 or 1;
/// predictions carry a probability in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub pos: Vec<f64>,
    pub open: f64,
}

impl Action {
    pub fn new(pos: Vec<f64>, open: f64) -> Self {
        Self { pos, open }
    }

    pub fn dim(&self) -> usize {
        self.pos.len()
    }

    /// Thresholded gripper state.
    pub fn open_bit(&self) -> bool {
        self.open > 0.5
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One synthetic task: a context vector plus `k` ground-truth successful
/// actions with pairwise position distance at least `s_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub split: Split,
    pub k: usize,
    pub context: Vec<f64>,
    pub modes: Vec<Action>,
}

impl Scene {
    /// Minimum pairwise distance between mode positions; `+inf` for k = 1.
    pub fn min_mode_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.modes.len() {
            for j in (i + 1)..self.modes.len() {
                best = best.min(dist(&self.modes[i].pos, &self.modes[j].pos));
            }
        }
        best
    }
}

/// A single imitation example: one scene and one of its modes as the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub scene_id: u64,
    pub mode_index: usize,
    pub label: Action,
}

/// Generation parameters for a task suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Workspace dimension.
    pub d: usize,
    /// Maximum modes per scene; the count is drawn uniformly from [1, k_max].
    pub k_max: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Minimum pairwise mode distance. The default 0.25 = 2l + 0.05 keeps
    /// radius-l neighborhoods disjoint at the default l = 0.1.
    pub s_min: f64,
    /// Pass the context through a fixed random linear map instead of exposing
    /// mode coordinates directly.
    pub context_map: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            d: 2,
            k_max: 3,
            train_scenes: 24,
            val_scenes: 8,
            test_scenes: 8,
            s_min: 0.25,
            context_map: false,
        }
    }
}

impl SuiteConfig {
    pub fn total_scenes(&self) -> usize {
        self.train_scenes + self.val_scenes + self.test_scenes
    }

    /// Context vector length: mode positions padded to `k_max` slots plus a
    /// one-hot encoding of the mode count.
    pub fn context_dim(&self) -> usize {
        self.d * self.k_max + self.k_max
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(CoreError::Config("suite.d must be >= 1".into()));
        }
        if self.k_max < 1 {
            return Err(CoreError::Config("suite.k_max must be >= 1".into()));
        }
        if !(self.s_min > 0.0) {
            return Err(CoreError::Config("suite.s_min must be > 0".into()));
        }
        if self.total_scenes() == 0 {
            return Err(CoreError::Config("suite has no scenes".into()));
        }
        Ok(())
    }
}

/// A generated task suite. Regeneration from `(config, seed)` is bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub format_version: u32,
    pub tool: String,
    pub seed: u64,
    pub config: SuiteConfig,
    pub scenes: Vec<Scene>,
}

pub const SUITE_FORMAT_VERSION: u32 = 1;

impl TaskSuite {
    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim()
    }

    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    /// Content hash used to bind checkpoints to the suite they trained on.
    pub fn signature(&self) -> String {
        let json = serde_json::to_string(self).expect("suite serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_string(&digest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let suite: TaskSuite = serde_json::from_str(&text)?;
        suite.validate()?;
        Ok(suite)
    }

    /// Checks every scene invariant: mode count, workspace bounds, binary
    /// open states, pairwise separation, and context consistency.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let map = context_map_matrix(&self.config, self.seed);
        for scene in &self.scenes {
            if scene.k != scene.modes.len() || scene.k < 1 {
                return Err(CoreError::Config(format!(
                    "scene {}: k={} disagrees with {} modes",
                    scene.id,
                    scene.k,
                    scene.modes.len()
                )));
            }
            for mode in &scene.modes {
                if mode.dim() != self.config.d {
                    return Err(CoreError::Config(format!(
                        "scene {}: mode dimension {} != {}",
                        scene.id,
                        mode.dim(),
                        self.config.d
                    )));
                }
                if mode.pos.iter().any(|p| !(-1.0..=1.0).contains(p)) {
                    return Err(CoreError::Config(format!(
                        "scene {}: mode position outside workspace",
                        scene.id
                    )));
                }
                if mode.open != 0.0 && mode.open != 1.0 {
                    return Err(CoreError::Config(format!(
                        "scene {}: mode open state {} not binary",
                        scene.id, mode.open
                    )));
                }
            }
            if scene.k >= 2 && scene.min_mode_separation() < self.config.s_min {
                return Err(CoreError::Config(format!(
                    "scene {}: modes closer than s_min={}",
                    scene.id, self.config.s_min
                )));
            }
            let expected = encode_context(&scene.modes, &self.config, map.as_deref());
            if expected != scene.context {
                return Err(CoreError::Config(format!(
                    "scene {}: context does not match its mode set",
                    scene.id
                )));
            }
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Context encoding: mode positions in generation order, zero-padded to
/// `k_max` slots, followed by a one-hot of the mode count, optionally passed
/// through the suite's fixed random linear map.
pub fn encode_context(modes: &[Action], config: &SuiteConfig, map: Option<&[f64]>) -> Vec<f64> {
    let c = config.context_dim();
    let mut raw = vec![0.0; c];
    for (slot, mode) in modes.iter().enumerate() {
        raw[slot * config.d..(slot + 1) * config.d].copy_from_slice(&mode.pos);
    }
    raw[config.d * config.k_max + (modes.len() - 1)] = 1.0;
    match map {
        None => raw,
        Some(m) => {
            // Square map, row-major c x c.
            let mut out = vec![0.0; c];
            for (row, o) in out.iter_mut().enumerate() {
                *o = m[row * c..(row + 1) * c]
                    .iter()
                    .zip(&raw)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            out
        }
    }
}

/// The fixed random linear map for a suite, or `None` when disabled.
pub fn context_map_matrix(config: &SuiteConfig, seed: u64) -> Option<Vec<f64>> {
    if !config.context_map {
        return None;
    }
    let c = config.context_dim();
    let mut rng = derive_rng(seed, "suite/context_map", &[]);
    let scale = 1.0 / (c as f64).sqrt();
    Some(
        (0..c * c)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// Generates a task suite. Each scene draws its mode count uniformly from
/// [1, k_max] and rejection-samples mode positions until the pairwise
/// separation constraint holds; after [`MAX_PLACEMENT_ATTEMPTS`] failed
/// attempts generation aborts with an infeasibility error.
pub fn generate_suite(config: &SuiteConfig, seed: u64) -> Result<TaskSuite> {
    config.validate()?;
    let map = context_map_matrix(config, seed);
    let mut scenes = Vec::with_capacity(config.total_scenes());
    for idx in 0..config.total_scenes() as u64 {
        let split = if (idx as usize) < config.train_scenes {
            Split::Train
        } else if (idx as usize) < config.train_scenes + config.val_scenes {
            Split::Val
        } else {
            Split::Test
        };
        let mut rng = derive_rng(seed, "suite/scene", &[idx]);
        let k = rng.random_range(1..=config.k_max);
        let positions = place_modes(config, k, &mut rng).ok_or(CoreError::Infeasible {
            scene: idx,
            k,
            s_min: config.s_min,
            d: config.d,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let modes: Vec<Action> = positions
            .into_iter()
            .map(|pos| {
                let open = if rng.random::<bool>() { 1.0 } else { 0.0 };
                Action::new(pos, open)
            })
            .collect();
        let context = encode_context(&modes, config, map.as_deref());
        scenes.push(Scene {
            id: idx,
            split,
            k,
            context,
            modes,
        });
    }
    Ok(TaskSuite {
        format_version: SUITE_FORMAT_VERSION,
        tool: crate::TOOL_VERSION.to_string(),
        seed,
        config: config.clone(),
        scenes,
    })
}

/// One attempt draws all `k` positions i.i.d. uniform over the workspace and
/// accepts iff every pair is at least `s_min` apart.
fn place_modes(config: &SuiteConfig, k: usize, rng: &mut impl Rng) -> Option<Vec<Vec<f64>>> {
    'attempt: for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let positions: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..config.d).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        for i in 0..k {
            for j in (i + 1)..k {
                if dist(&positions[i], &positions[j]) < config.s_min {
                    continue 'attempt;
                }
            }
        }
        return Some(positions);
    }
    None
}

/// Draws one demonstration label uniformly over the scene's modes.
pub fn sample_demonstration(scene: &Scene, rng: &mut impl Rng) -> Demonstration {
    let mode_index = rng.random_range(0..scene.modes.len());
    Demonstration {
        scene_id: scene.id,
        mode_index,
        label: scene.modes[mode_index].clone(),
    }
}

/// Perturbs a label position with isotropic Gaussian noise of standard
/// deviation `sigma`; the open state is copied from the label (noisy open
/// states are discarded downstream).
///
/// Coordinates are clamped to the guard band `[-(1+3σ), 1+3σ]` so every noisy
/// sample stays inside the representable workspace envelope; at the default
/// σ the clamp touches well under 0.1% of draws and leaves sample moments
/// intact to test tolerances.
pub fn sample_noisy_action(label: &Action, sigma: f64, rng: &mut impl Rng) -> Action {
    assert!(sigma > 0.0, "sigma must be > 0");
    let bound = 1.0 + 3.0 * sigma;
    let pos = label
        .pos
        .iter()
        .map(|&p| (p + sigma * rng.sample::<f64, _>(StandardNormal)).clamp(-bound, bound))
        .collect();
    Action::new(pos, label.open)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(d: usize, k_max: usize, s_min: f64) -> SuiteConfig {
        SuiteConfig {
            d,
            k_max,
            train_scenes: 10,
            val_scenes: 0,
            test_scenes: 0,
            s_min,
            context_map: false,
        }
    }

    #[test]
    fn k_max_one_forces_single_mode() {
        let suite = generate_suite(&small_config(2, 1, 0.25), 7).unwrap();
        assert_eq!(suite.scenes.len(), 10);
        assert!(suite.scenes.iter().all(|s| s.k == 1 && s.modes.len() == 1));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = small_config(2, 4, 0.25);
        let a = generate_suite(&cfg, 7).unwrap();
        let b = generate_suite(&cfg, 7).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = generate_suite(&cfg, 8).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn one_dim_dense_packing_is_infeasible() {
        // At most 5 points in [-1,1] can be pairwise 0.5 apart; k is drawn
        // from [1,50] so some scene demands an impossible packing.
        let mut cfg = small_config(1, 50, 0.5);
        cfg.train_scenes = 10;
        match generate_suite(&cfg, 7) {
            Err(CoreError::Infeasible { attempts, .. }) => {
                assert_eq!(attempts, MAX_PLACEMENT_ATTEMPTS);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn generated_suites_validate_and_separate() {
        for seed in [1, 2, 3] {
            let suite = generate_suite(&small_config(2, 4, 0.25), seed).unwrap();
            suite.validate().unwrap();
            for scene in &suite.scenes {
                if scene.k >= 2 {
                    assert!(scene.min_mode_separation() >= 0.25);
                }
            }
        }
    }

    #[test]
    fn split_assignment_counts() {
        let cfg = SuiteConfig {
            train_scenes: 5,
            val_scenes: 3,
            test_scenes: 2,
            ..SuiteConfig::default()
        };
        let suite = generate_suite(&cfg, 1).unwrap();
        assert_eq!(suite.scenes_in(Split::Train).count(), 5);
        assert_eq!(suite.scenes_in(Split::Val).count(), 3);
        assert_eq!(suite.scenes_in(Split::Test).count(), 2);
    }

    #[test]
    fn context_identifies_modes_and_roundtrips_through_map() {
        let mut cfg = small_config(2, 3, 0.25);
        cfg.context_map = true;
        let suite = generate_suite(&cfg, 11).unwrap();
        suite.validate().unwrap();
        // Distinct mode sets must give distinct contexts.
        for i in 0..suite.scenes.len() {
            for j in (i + 1)..suite.scenes.len() {
                assert_ne!(suite.scenes[i].context, suite.scenes[j].context);
            }
        }
    }

    #[test]
    fn demonstration_k1_always_single_mode() {
        let suite = generate_suite(&small_config(2, 1, 0.25), 3).unwrap();
        let scene = &suite.scenes[0];
        let mut rng = derive_rng(0, "test/demo", &[]);
        for _ in 0..32 {
            let demo = sample_demonstration(scene, &mut rng);
            assert_eq!(demo.mode_index, 0);
            assert_eq!(demo.label, scene.modes[0]);
        }
    }

    #[test]
    fn demonstration_frequencies_are_uniform() {
        let mut cfg = small_config(2, 4, 0.25);
        cfg.train_scenes = 40;
        let suite = generate_suite(&cfg, 5).unwrap();
        let scene = suite
            .scenes
            .iter()
            .find(|s| s.k == 4)
            .expect("a k=4 scene exists");
        let mut rng = derive_rng(9, "test/demo_freq", &[]);
        let draws = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[sample_demonstration(scene, &mut rng).mode_index] += 1;
        }
        for &c in &counts {
            let f = c as f64 / draws as f64;
            assert!((0.24..=0.26).contains(&f), "frequency {f} outside [0.24, 0.26]");
        }
    }

    #[test]
    fn demonstration_uniformity_chi_square() {
        // dof = k-1; critical values at alpha = 0.001.
        let critical = [0.0, 10.828, 13.816, 16.266];
        let suite = generate_suite(&small_config(2, 4, 0.25), 17).unwrap();
        for scene in &suite.scenes {
            if scene.k == 1 {
                continue;
            }
            let mut rng = derive_rng(23, "test/chi2", &[scene.id]);
            let draws = 10_000usize;
            let mut counts = vec![0usize; scene.k];
            for _ in 0..draws {
                counts[sample_demonstration(scene, &mut rng).mode_index] += 1;
            }
            let expected = draws as f64 / scene.k as f64;
            let chi2: f64 = counts
                .iter()
                .map(|&c| {
                    let diff = c as f64 - expected;
                    diff * diff / expected
                })
                .sum();
            assert!(
                chi2 < critical[scene.k - 1],
                "scene {} chi2={chi2} rejects uniformity",
                scene.id
            );
        }
    }

    #[test]
    fn demonstration_same_rng_state_same_label() {
        let suite = generate_suite(&small_config(2, 4, 0.25), 5).unwrap();
        let scene = &suite.scenes[1];
        let a = sample_demonstration(scene, &mut derive_rng(1, "demo", &[4]));
        let b = sample_demonstration(scene, &mut derive_rng(1, "demo", &[4]));
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_action_sigma_to_zero_limit() {
        let label = Action::new(vec![0.3, -0.7], 1.0);
        let mut rng = derive_rng(2, "noise", &[]);
        let noisy = sample_noisy_action(&label, 1e-12, &mut rng);
        for (a, b) in noisy.pos.iter().zip(&label.pos) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(noisy.open, 1.0);
    }

    #[test]
    fn noisy_action_moment_check() {
        let label = Action::new(vec![0.0, 0.0, 0.0], 0.0);
        let mut rng = derive_rng(3, "noise_moments", &[]);
        let n = 100_000;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..n {
            let a = sample_noisy_action(&label, 0.5, &mut rng);
            for (i, &p) in a.pos.iter().enumerate() {
                sums[i] += p;
                sq[i] += p * p;
            }
        }
        for i in 0..3 {
            let mean = sums[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!((0.24..=0.26).contains(&var), "variance {var} out of range");
        }
    }

    #[test]
    fn noisy_action_stays_in_guard_band() {
        let label = Action::new(vec![1.0], 1.0);
        let mut rng = derive_rng(4, "noise_band", &[]);
        for _ in 0..50_000 {
            let a = sample_noisy_action(&label, 0.5, &mut rng);
            assert!(a.pos[0].abs() <= 2.5);
        }
    }

    #[test]
    fn suite_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.json");
        let suite = generate_suite(&small_config(3, 2, 0.3), 42).unwrap();
        suite.save(&path).unwrap();
        let loaded = TaskSuite::load(&path).unwrap();
        assert_eq!(suite, loaded);
        assert_eq!(suite.signature(), loaded.signature());
    }
}
