//! The scene/fixation/step protocol: training with sampling policies and
//! online dictionary learning, and frozen greedy evaluation.
//!
//! Every random decision draws from a stream addressed by the master seed
//! plus structural indices (scene, fixation), never by call order, so runs
//! replay bit-exactly and evaluation results are independent of scheduling.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use verge_core::env::{
    self, generate_scene, EnvParams, FixationMode, SceneKind, StereoScene,
};
use verge_core::gassom::{encode_pyramid, DictionarySet, FeatureBundle};
use verge_core::learner::{
    compute_rewards, train_step, Agent, HierarchicalAgent, ParallelAgent, RewardSet,
    StepDiagnostics,
};
use verge_core::policy::{
    act_hierarchical, act_parallel, assemble_features, ActionMode, OptionKind,
};
use verge_core::pyramid::extract_pyramid;
use verge_core::{seeds, VERGENCE_ACTIONS};

use crate::config::{Config, EvalKind, ModelKind};
use crate::metrics::{convergence_rate, median_abs, oscillation_metric};
use crate::{checkpoint, HarnessError};

/// Complete mutable state of a training run; exactly what a checkpoint
/// stores. Stream positions need no persistence because every stream is
/// re-derived from (master seed, scene index, fixation index).
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub config: Config,
    /// Resolved config as TOML, frozen at creation; checkpoints embed this
    /// text verbatim.
    pub config_text: String,
    pub master_seed: u64,
    pub dicts: DictionarySet<f32>,
    pub agent: Agent<f32>,
    pub total_steps: u64,
    /// Scene the next fixation belongs to.
    pub scene_index: u64,
    /// Next fixation within that scene.
    pub fixation_index: u64,
}

impl RunState {
    pub fn fresh(config: Config, master_seed: u64) -> Self {
        let config_text = config.to_toml();
        let dicts = DictionarySet::init(config.gassom_params(), master_seed);
        let temp = config.run.temperature;
        let agent = match config.run.model {
            ModelKind::Parallel => Agent::Parallel(ParallelAgent::new(
                temp,
                config.nac_params(),
                config.normalizer_params(),
            )),
            ModelKind::Hierarchical => Agent::Hierarchical(HierarchicalAgent::new(
                temp,
                config.nac_params(),
                config.normalizer_params(),
            )),
        };
        Self {
            config,
            config_text,
            master_seed,
            dicts,
            agent,
            total_steps: 0,
            scene_index: 0,
            fixation_index: 0,
        }
    }
}

/// Which pool a synthesized scene belongs to; ids are prefixed so the
/// train/test separation is checkable from logs alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenePool {
    Train,
    Test,
}

impl ScenePool {
    fn tag(self) -> &'static str {
        match self {
            ScenePool::Train => "train-scene",
            ScenePool::Test => "test-scene",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            ScenePool::Train => "train",
            ScenePool::Test => "test",
        }
    }
}

/// Synthesizes the scene at `index` of a pool. Draw order within the scene
/// stream is fixed: texture seed, kind, background disparity, then for
/// conflict scenes offset magnitude and sign. `force_kind` (evaluation)
/// still consumes the kind draw so the remaining draws stay aligned.
pub fn synthesize_scene(
    config: &Config,
    pool: ScenePool,
    index: u64,
    master_seed: u64,
    force_kind: Option<SceneKind>,
) -> Result<StereoScene<f32>, HarnessError> {
    let mut rng = seeds::stream(master_seed, pool.tag(), &[index]);
    let texture_seed: u64 = rng.gen();
    let conflict_draw: f64 = rng.gen();
    let cur = &config.curriculum;
    let kind = force_kind.unwrap_or(if conflict_draw < cur.conflict_fraction {
        SceneKind::Conflict
    } else {
        SceneKind::UniformPlane
    });
    let bg = rng.gen_range(cur.plane_disparity_min..=cur.plane_disparity_max) as f64;
    let spec = match kind {
        SceneKind::UniformPlane => config.plane_spec(bg),
        SceneKind::Conflict => {
            let magnitude = rng.gen_range(cur.conflict_offset_min..=cur.conflict_offset_max);
            let sign = if rng.gen::<bool>() { 1 } else { -1 };
            config.conflict_spec(bg, bg + f64::from(sign * magnitude))
        }
    };
    let mut scene = generate_scene::<f32>(&spec, &config.env_params(), texture_seed)?;
    scene.id = format!("{}-{}", pool.prefix(), scene.id);
    Ok(scene)
}

fn fixation_mode(scene: &StereoScene<f32>) -> FixationMode {
    if scene.anchor.is_some() {
        FixationMode::Pinned
    } else {
        FixationMode::Uniform
    }
}

/// Aggregated learning metrics over one reporting window.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Total steps completed when the row was emitted.
    pub step: u64,
    /// Mean |residual| at fixation end over the window.
    pub mean_abs_final_residual: f64,
    pub mean_reward_parallel: f64,
    pub mean_reward_foveal: f64,
    pub mean_reward_inner: f64,
    pub mean_reward_outer: f64,
    /// Option selection frequencies (zero for the parallel model).
    pub selection_freq: [f64; 3],
}

#[derive(Default)]
struct MetricsWindow {
    final_residuals: Vec<f64>,
    reward_sums: [f64; 4],
    reward_steps: u64,
    selection_counts: [u64; 3],
}

impl MetricsWindow {
    fn absorb_step(&mut self, d: &StepDiagnostics) {
        self.reward_sums[0] += d.rewards.parallel;
        self.reward_sums[1] += d.rewards.foveal;
        self.reward_sums[2] += d.rewards.inner;
        self.reward_sums[3] += d.rewards.outer;
        self.reward_steps += 1;
        if let Some(o) = d.option_index {
            self.selection_counts[o] += 1;
        }
    }

    fn emit(&mut self, step: u64) -> MetricsRow {
        let n = self.reward_steps.max(1) as f64;
        let fr = if self.final_residuals.is_empty() {
            0.0
        } else {
            self.final_residuals.iter().map(|r| r.abs()).sum::<f64>()
                / self.final_residuals.len() as f64
        };
        let total_sel: u64 = self.selection_counts.iter().sum();
        let sel = if total_sel > 0 {
            self.selection_counts.map(|c| c as f64 / total_sel as f64)
        } else {
            [0.0; 3]
        };
        let row = MetricsRow {
            step,
            mean_abs_final_residual: fr,
            mean_reward_parallel: self.reward_sums[0] / n,
            mean_reward_foveal: self.reward_sums[1] / n,
            mean_reward_inner: self.reward_sums[2] / n,
            mean_reward_outer: self.reward_sums[3] / n,
            selection_freq: sel,
        };
        *self = MetricsWindow::default();
        row
    }

    fn has_data(&self) -> bool {
        self.reward_steps > 0
    }
}

#[derive(Debug)]
pub struct TrainingOutput {
    pub state: RunState,
    pub metrics: Vec<MetricsRow>,
    /// Steps executed by this call (excludes steps from a resumed prefix).
    pub steps_run: u64,
    pub checkpoint_path: Option<PathBuf>,
}

/// One training fixation: sample gaze, reset traces, run the configured
/// number of learning steps. Returns the per-step diagnostics.
fn train_fixation(
    state: &mut RunState,
    scene: &StereoScene<f32>,
    env_params: &EnvParams,
) -> Result<Vec<StepDiagnostics>, HarnessError> {
    let (scene_idx, fix_idx) = (state.scene_index, state.fixation_index);
    let mut fix_rng = seeds::stream(state.master_seed, "train-fixation", &[scene_idx, fix_idx]);
    let mut gaze = env::sample_fixation(
        scene,
        env_params,
        fixation_mode(scene),
        state.config.curriculum.initial_error,
        &mut fix_rng,
    )?;
    state.agent.reset_traces();
    let mut pyramid = extract_pyramid(scene, &gaze);
    let mut step_rng = seeds::stream(state.master_seed, "train-step", &[scene_idx, fix_idx]);
    let steps = state.config.run.steps_per_fixation;
    let mut diags = Vec::with_capacity(steps as usize);
    for s in 0..steps {
        let d = train_step(
            &mut state.agent,
            &mut state.dicts,
            scene,
            &mut gaze,
            &mut pyramid,
            env_params,
            s + 1 == steps,
            &mut step_rng,
        );
        state.total_steps += 1;
        diags.push(d);
    }
    Ok(diags)
}

/// Runs training from `state` to the configured scene budget.
///
/// With an output directory, checkpoints are written atomically at the
/// configured interval (fixation-aligned) and at the end; a non-finite
/// learning state aborts with an error while the last saved checkpoint
/// stays intact on disk. `progress` sees each metrics row as it is emitted.
pub fn run_training(
    mut state: RunState,
    out_dir: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&MetricsRow)>,
) -> Result<TrainingOutput, HarnessError> {
    let env_params = state.config.env_params();
    let ck_path = out_dir.map(|d| d.join("checkpoint.bin"));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut metrics = Vec::new();
    let mut window = MetricsWindow::default();
    let steps_at_entry = state.total_steps;
    let metrics_interval = state.config.run.metrics_interval.max(1);
    let mut next_metrics = (state.total_steps / metrics_interval + 1) * metrics_interval;
    let ck_interval = state.config.run.checkpoint_interval;
    let mut last_ck_step = state.total_steps;

    while state.scene_index < state.config.run.scenes {
        let scene = synthesize_scene(
            &state.config,
            ScenePool::Train,
            state.scene_index,
            state.master_seed,
            None,
        )?;
        while state.fixation_index < state.config.run.fixations_per_scene {
            // The learner hard-faults on non-finite state; convert that
            // into a clean abort that leaves the last checkpoint alone.
            let result = catch_unwind(AssertUnwindSafe(|| {
                train_fixation(&mut state, &scene, &env_params)
            }));
            let diags = match result {
                Ok(r) => r?,
                Err(payload) => {
                    let msg = payload
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| payload.downcast_ref::<String>().cloned())
                        .unwrap_or_default();
                    if msg.contains("non-finite") {
                        return Err(HarnessError::NonFinite { step: state.total_steps });
                    }
                    resume_unwind(payload);
                }
            };
            for d in &diags {
                window.absorb_step(d);
            }
            if let Some(last) = diags.last() {
                window.final_residuals.push(last.residual_after);
            }
            state.fixation_index += 1;

            if state.total_steps >= next_metrics {
                metrics.push(window.emit(state.total_steps));
                if let Some(f) = progress.as_mut() {
                    f(metrics.last().unwrap());
                }
                next_metrics += metrics_interval;
            }
            if ck_interval > 0 && state.total_steps - last_ck_step >= ck_interval {
                if let Some(p) = &ck_path {
                    checkpoint::save(&state, p)?;
                }
                last_ck_step = state.total_steps;
            }
        }
        state.fixation_index = 0;
        state.scene_index += 1;
    }

    if window.has_data() {
        metrics.push(window.emit(state.total_steps));
        if let Some(f) = progress.as_mut() {
            f(metrics.last().unwrap());
        }
    }
    if let Some(p) = &ck_path {
        checkpoint::save(&state, p)?;
    }
    let steps_run = state.total_steps - steps_at_entry;
    Ok(TrainingOutput { state, metrics, steps_run, checkpoint_path: ck_path })
}

/// Action selection for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// Frozen model, greedy at all levels.
    Greedy,
    /// Perfect test double: the action closest to the current residual
    /// (ties to the smaller magnitude), ignoring perception entirely.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub fixations: usize,
    pub kind: EvalKind,
    pub initial_error: i32,
    pub steps: u64,
    pub record_rewards: bool,
    pub controller: ControllerKind,
    pub workers: usize,
}

impl EvalOptions {
    pub fn from_config(config: &Config) -> Self {
        Self {
            fixations: config.eval.fixations,
            kind: config.eval.kind,
            initial_error: config.eval.initial_error,
            steps: config.run.steps_per_fixation,
            record_rewards: config.eval.record_rewards,
            controller: ControllerKind::Greedy,
            workers: 1,
        }
    }
}

/// Everything recorded about one evaluation fixation.
#[derive(Debug, Clone, PartialEq)]
pub struct FixationRecord {
    pub scene_id: String,
    pub fixation: (usize, usize),
    pub gt_vergence: f64,
    pub initial_residual: f64,
    pub final_residual: f64,
    /// Executed action per step.
    pub actions: Vec<i32>,
    /// Selected option per step (hierarchical only).
    pub options: Vec<Option<usize>>,
    /// Vergence after each step.
    pub vergences: Vec<i32>,
    /// Residual after each step.
    pub residuals: Vec<f64>,
    /// Reward channels after each step, when recorded.
    pub rewards: Vec<Option<RewardSet>>,
    pub oscillation: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub fixations: usize,
    pub median_final_abs_residual: f64,
    pub convergence_rate: f64,
    pub mean_oscillation: f64,
}

pub struct EvalReport {
    pub records: Vec<FixationRecord>,
    pub summary: EvalSummary,
}

fn oracle_action_index(residual: f64) -> usize {
    let mut best = 0usize;
    for (i, &a) in VERGENCE_ACTIONS.iter().enumerate() {
        let (da, db) = (
            (residual - f64::from(a)).abs(),
            (residual - f64::from(VERGENCE_ACTIONS[best])).abs(),
        );
        if da < db || (da == db && a.abs() < VERGENCE_ACTIONS[best].abs()) {
            best = i;
        }
    }
    best
}

fn eval_fixation(
    dicts: &DictionarySet<f32>,
    agent: &Agent<f32>,
    config: &Config,
    opts: &EvalOptions,
    master_seed: u64,
    index: u64,
) -> Result<FixationRecord, HarnessError> {
    let env_params = config.env_params();
    let mut rng = seeds::stream(master_seed, "eval-fixation", &[index]);
    let scene = synthesize_scene(
        config,
        ScenePool::Test,
        index,
        master_seed,
        Some(opts.kind.scene_kind()),
    )?;
    let mode = match opts.kind {
        EvalKind::Plane => FixationMode::Uniform,
        EvalKind::Conflict => FixationMode::Pinned,
    };
    let mut gaze = env::sample_fixation(&scene, &env_params, mode, opts.initial_error, &mut rng)?;
    let gt_vergence = env::ground_truth_vergence(&scene, &gaze);
    let initial_residual = env::residual_disparity(&scene, &gaze);

    let needs_perception = opts.controller == ControllerKind::Greedy;
    let mut pyramid = extract_pyramid(&scene, &gaze);
    let mut bundle: Option<FeatureBundle<f32>> = (needs_perception || opts.record_rewards)
        .then(|| encode_pyramid(dicts, &pyramid));

    let steps = opts.steps as usize;
    let mut actions = Vec::with_capacity(steps);
    let mut options = Vec::with_capacity(steps);
    let mut vergences = Vec::with_capacity(steps);
    let mut residuals = Vec::with_capacity(steps);
    let mut rewards = Vec::with_capacity(steps);
    // Greedy consumes no rng draws; the stream exists only for API shape.
    let mut dummy_rng = seeds::stream(master_seed, "eval-greedy-unused", &[index]);

    for _ in 0..steps {
        let (action_index, option_index) = match opts.controller {
            ControllerKind::Oracle => {
                (oracle_action_index(env::residual_disparity(&scene, &gaze)), None)
            }
            ControllerKind::Greedy => {
                let features =
                    assemble_features(bundle.as_ref().expect("greedy always encodes"));
                match agent {
                    Agent::Parallel(a) => {
                        let d =
                            act_parallel(&a.unit.net, &features, ActionMode::Greedy, &mut dummy_rng);
                        (d.action_index, None)
                    }
                    Agent::Hierarchical(a) => {
                        let d = act_hierarchical(
                            &a.top.net,
                            &a.foveal.net,
                            &a.inner.net,
                            &a.outer.net,
                            &features,
                            ActionMode::Greedy,
                            &mut dummy_rng,
                        );
                        (d.action_index, Some(d.option_index))
                    }
                }
            }
        };
        let delta = VERGENCE_ACTIONS[action_index];
        gaze = env::apply_action(gaze, delta, &env_params)?;
        pyramid = extract_pyramid(&scene, &gaze);
        if needs_perception || opts.record_rewards {
            bundle = Some(encode_pyramid(dicts, &pyramid));
        }
        actions.push(delta);
        options.push(option_index);
        vergences.push(gaze.vergence);
        residuals.push(env::residual_disparity(&scene, &gaze));
        rewards.push(if opts.record_rewards {
            Some(compute_rewards(bundle.as_ref().unwrap()))
        } else {
            None
        });
    }

    let oscillation = if actions.len() >= 5 { oscillation_metric(&actions) } else { 0 };
    Ok(FixationRecord {
        scene_id: scene.id.clone(),
        fixation: gaze.fixation,
        gt_vergence,
        initial_residual,
        final_residual: *residuals.last().unwrap_or(&initial_residual),
        actions,
        options,
        vergences,
        residuals,
        rewards,
        oscillation,
    })
}

/// Frozen-model evaluation over independent test fixations. Results are
/// identical for any worker count because each fixation derives its own
/// streams from (master seed, index).
pub fn run_evaluation(
    dicts: &DictionarySet<f32>,
    agent: &Agent<f32>,
    config: &Config,
    opts: &EvalOptions,
    master_seed: u64,
) -> Result<EvalReport, HarnessError> {
    let n = opts.fixations;
    let one = |i: usize| eval_fixation(dicts, agent, config, opts, master_seed, i as u64);
    let records: Vec<FixationRecord> = if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        pool.install(|| (0..n).into_par_iter().map(one).collect::<Result<_, _>>())?
    } else {
        (0..n).map(one).collect::<Result<_, _>>()?
    };

    let finals: Vec<f64> = records.iter().map(|r| r.final_residual).collect();
    let mean_osc = records.iter().map(|r| f64::from(r.oscillation)).sum::<f64>()
        / records.len().max(1) as f64;
    let summary = EvalSummary {
        fixations: records.len(),
        median_final_abs_residual: median_abs(&finals),
        convergence_rate: convergence_rate(&finals),
        mean_oscillation: mean_osc,
    };
    Ok(EvalReport { records, summary })
}

/// Option label helper for exports.
pub fn option_label(index: usize) -> &'static str {
    OptionKind::from_index(index).label()
}
