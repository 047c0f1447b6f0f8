//! Open-loop policy probing: present a known disparity to a frozen model
//! and record the full action (and option) distributions.
//!
//! A probe scene is a zero-disparity plane, so both eyes see the same
//! texture; setting the vergence to `d` then shifts the right-eye window by
//! exactly `d` pixels. The stimulus the model perceives is the one a real
//! scene would produce at residual `-d`, so a model trained to null what it
//! sees answers a positive probe disparity with a negative action.

use rand::Rng;
use verge_core::env::{generate_scene, GazeState};
use verge_core::gassom::{encode_pyramid, DictionarySet};
use verge_core::learner::Agent;
use verge_core::policy::{
    act_hierarchical, act_parallel, assemble_features, ActionMode, NUM_ACTIONS, NUM_OPTIONS,
};
use verge_core::pyramid::extract_pyramid;
use verge_core::{seeds, Float};

use crate::config::Config;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeOptions {
    pub d_min: i32,
    pub d_max: i32,
    pub probes_per_d: usize,
}

impl ProbeOptions {
    pub fn from_config(config: &Config) -> Self {
        Self {
            d_min: config.probe.d_min,
            d_max: config.probe.d_max,
            probes_per_d: config.probe.probes_per_d,
        }
    }
}

/// Mean policy response per probed disparity. Matrices are indexed
/// `[d_index][action_index]`; every row sums to one because each probe's
/// distribution does.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMatrix {
    pub d_values: Vec<i32>,
    pub probes_per_d: usize,
    /// Mean action distribution; for the hierarchical model this is the
    /// marginal over options.
    pub action: Vec<Vec<f64>>,
    /// Mean option distribution (hierarchical only).
    pub selection: Option<Vec<Vec<f64>>>,
    /// Mean per-option action distributions, ordered F, IP, OP
    /// (hierarchical only).
    pub bottoms: Option<[Vec<Vec<f64>>; 3]>,
    /// Per disparity: probes whose greedy action's sign opposes the probe's
    /// (both nonzero).
    pub opposed: Vec<usize>,
    /// Mean greedy action per disparity.
    pub greedy_mean: Vec<f64>,
}

impl PolicyMatrix {
    pub fn row(&self, d: i32) -> Option<&[f64]> {
        let i = self.d_values.iter().position(|&x| x == d)?;
        Some(&self.action[i])
    }

    /// Fraction of probes at `d` whose greedy action sign opposes `d`.
    pub fn opposition_rate(&self, d: i32) -> Option<f64> {
        let i = self.d_values.iter().position(|&x| x == d)?;
        Some(self.opposed[i] as f64 / self.probes_per_d as f64)
    }
}

fn to_f64<T: Float>(p: &[T]) -> Vec<f64> {
    p.iter().map(|&x| x.f64()).collect()
}

/// Sweeps the probe disparity range. Each probe index `j` carries its own
/// texture and fixation, reused across the whole sweep so rows differ only
/// by the presented disparity.
pub fn probe_policy(
    dicts: &DictionarySet<f32>,
    agent: &Agent<f32>,
    config: &Config,
    opts: &ProbeOptions,
    master_seed: u64,
) -> Result<PolicyMatrix, HarnessError> {
    if opts.d_min > opts.d_max {
        return Err(HarnessError::Invalid("probe range is empty".into()));
    }
    if opts.probes_per_d == 0 {
        return Err(HarnessError::Invalid("probes_per_d must be positive".into()));
    }
    let env_params = config.env_params();
    let reach = opts.d_min.abs().max(opts.d_max.abs());
    if reach > env_params.v_max {
        return Err(HarnessError::Invalid(format!(
            "probe disparity {reach} exceeds the vergence range {}",
            env_params.v_max
        )));
    }

    let d_values: Vec<i32> = (opts.d_min..=opts.d_max).collect();
    let nd = d_values.len();
    let hierarchical = matches!(agent, Agent::Hierarchical(_));
    let mut action = vec![vec![0.0f64; NUM_ACTIONS]; nd];
    let mut selection = vec![vec![0.0f64; NUM_OPTIONS]; nd];
    let mut bottoms: [Vec<Vec<f64>>; 3] =
        std::array::from_fn(|_| vec![vec![0.0f64; NUM_ACTIONS]; nd]);
    let mut opposed = vec![0usize; nd];
    let mut greedy_sum = vec![0.0f64; nd];

    for j in 0..opts.probes_per_d {
        let mut rng = seeds::stream(master_seed, "probe", &[j as u64]);
        let texture_seed: u64 = rng.gen();
        let scene = generate_scene::<f32>(&config.plane_spec(0.0), &env_params, texture_seed)?;
        let row = rng.gen_range(env_params.valid_range(scene.left.rows()));
        let col = rng.gen_range(env_params.valid_range(scene.left.cols()));
        // Greedy decisions consume no draws; this stream is never advanced.
        let mut unused = seeds::stream(master_seed, "probe-unused", &[j as u64]);

        for (i, &d) in d_values.iter().enumerate() {
            let gaze = GazeState { fixation: (row, col), vergence: d };
            let pyramid = extract_pyramid(&scene, &gaze);
            let bundle = encode_pyramid(dicts, &pyramid);
            let features = assemble_features(&bundle);
            let greedy_delta = match agent {
                Agent::Parallel(a) => {
                    let dec =
                        act_parallel(&a.unit.net, &features, ActionMode::Greedy, &mut unused);
                    let p = to_f64(&dec.probabilities);
                    for (acc, v) in action[i].iter_mut().zip(&p) {
                        *acc += v;
                    }
                    dec.delta
                }
                Agent::Hierarchical(a) => {
                    let dec = act_hierarchical(
                        &a.top.net,
                        &a.foveal.net,
                        &a.inner.net,
                        &a.outer.net,
                        &features,
                        ActionMode::Greedy,
                        &mut unused,
                    );
                    let p_top = to_f64(&dec.p_top);
                    let per_option =
                        [to_f64(&dec.p_foveal), to_f64(&dec.p_inner), to_f64(&dec.p_outer)];
                    for (acc, v) in selection[i].iter_mut().zip(&p_top) {
                        *acc += v;
                    }
                    for (o, dist) in per_option.iter().enumerate() {
                        for (acc, v) in bottoms[o][i].iter_mut().zip(dist) {
                            *acc += v;
                        }
                        // Marginal action distribution under the two-level
                        // sampling scheme.
                        for (acc, v) in action[i].iter_mut().zip(dist) {
                            *acc += p_top[o] * v;
                        }
                    }
                    dec.delta
                }
            };
            greedy_sum[i] += f64::from(greedy_delta);
            if d != 0 && greedy_delta != 0 && (d > 0) != (greedy_delta > 0) {
                opposed[i] += 1;
            }
        }
    }

    let n = opts.probes_per_d as f64;
    let normalize = |m: &mut Vec<Vec<f64>>| {
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    };
    normalize(&mut action);
    normalize(&mut selection);
    for b in bottoms.iter_mut() {
        normalize(b);
    }
    let greedy_mean = greedy_sum.iter().map(|s| s / n).collect();

    Ok(PolicyMatrix {
        d_values,
        probes_per_d: opts.probes_per_d,
        action,
        selection: hierarchical.then_some(selection),
        bottoms: hierarchical.then_some(bottoms),
        opposed,
        greedy_mean,
    })
}
