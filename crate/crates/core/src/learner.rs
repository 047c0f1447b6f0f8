//! Intrinsic rewards and natural actor-critic learning.
//!
//! Rewards are negated mean reconstruction errors computed from the
//! post-action retinal input, so acting to improve binocular alignment
//! directly improves the encoder's explanation of what it sees. Every
//! policy network (the parallel one, or the selector plus three regional
//! ones) carries its own critic, advantage weights and eligibility traces;
//! each fixation is treated as an episode.

use rand_chacha::ChaCha8Rng;

use crate::env::{self, EnvParams, GazeState, StereoScene};
use crate::gassom::{encode_pyramid, DictionarySet, FeatureBundle};
use crate::policy::{
    act_hierarchical, act_parallel, assemble_features, ActionMode, OptionKind, PolicyNetwork,
    DIM_FOVEAL, DIM_INNER, DIM_OUTER, DIM_PARALLEL, NUM_ACTIONS, NUM_OPTIONS,
};
use crate::pyramid::{extract_pyramid, patch_index, PyramidInput, Scale, PATCHES_PER_SCALE};
use crate::Float;

/// Natural actor-critic step sizes and discounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NacParams {
    pub gamma: f64,
    pub lambda: f64,
    pub alpha_critic: f64,
    pub alpha_advantage: f64,
    pub alpha_actor: f64,
}

impl Default for NacParams {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            lambda: 0.3,
            alpha_critic: 1e-2,
            alpha_advantage: 1e-2,
            alpha_actor: 2e-3,
        }
    }
}

/// Running z-score parameters for reward channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizerParams {
    /// Exponential moving-average rate.
    pub rate: f64,
    /// Variance floor.
    pub floor: f64,
    /// Symmetric bound on the normalized value. Caps the spikes that a
    /// freshly warmed or collapsed variance estimate would otherwise
    /// produce; those spikes can destabilize the critic.
    pub clip: f64,
}

impl Default for NormalizerParams {
    fn default() -> Self {
        Self { rate: 1e-3, floor: 1e-8, clip: 5.0 }
    }
}

/// Reward channels; the selector shares the parallel channel since its
/// reward is identical by definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardChannel {
    Parallel = 0,
    Foveal = 1,
    Inner = 2,
    Outer = 3,
}

pub const NUM_REWARD_CHANNELS: usize = 4;

/// Negated mean reconstruction errors for every pooling region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSet {
    /// Flat mean over all valid patches of all scales, negated.
    pub parallel: f64,
    pub foveal: f64,
    pub inner: f64,
    pub outer: f64,
}

impl RewardSet {
    /// Selector reward, identical to the parallel reward.
    pub fn selector(&self) -> f64 {
        self.parallel
    }

    pub fn channel(&self, ch: RewardChannel) -> f64 {
        match ch {
            RewardChannel::Parallel => self.parallel,
            RewardChannel::Foveal => self.foveal,
            RewardChannel::Inner => self.inner,
            RewardChannel::Outer => self.outer,
        }
    }
}

fn mean_error_over<T: Float>(bundle: &FeatureBundle<T>, scale: Scale, indices: &[usize]) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for &idx in indices {
        if bundle.is_valid(scale, idx) {
            sum += bundle.error(scale, idx).f64();
            count += 1;
        }
    }
    if count > 0 {
        sum / count as f64
    } else {
        0.0
    }
}

/// Rewards from the post-action pyramid's encoding. Each group averages
/// over its valid patches; groups with no valid patch contribute zero while
/// the outer weights stay fixed, and an invalid coarse center contributes
/// zero error.
pub fn compute_rewards<T: Float>(bundle: &FeatureBundle<T>) -> RewardSet {
    let all: Vec<usize> = (0..PATCHES_PER_SCALE).collect();
    let center9: Vec<usize> = {
        let mut v = Vec::with_capacity(9);
        for i in -1..=1 {
            for j in -1..=1 {
                v.push(patch_index(i, j));
            }
        }
        v
    };

    // Flat mean over all valid patches of all three scales.
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for scale in Scale::ALL {
        for idx in 0..PATCHES_PER_SCALE {
            if bundle.is_valid(scale, idx) {
                sum += bundle.error(scale, idx).f64();
                count += 1;
            }
        }
    }
    let parallel = if count > 0 { -(sum / count as f64) } else { 0.0 };

    let center = patch_index(0, 0);
    let coarse_center = if bundle.is_valid(Scale::Coarse, center) {
        bundle.error(Scale::Coarse, center).f64()
    } else {
        0.0
    };
    let foveal = -(coarse_center
        + mean_error_over(bundle, Scale::Medium, &center9)
        + mean_error_over(bundle, Scale::Fine, &all))
        / 3.0;
    let inner = -(mean_error_over(bundle, Scale::Coarse, &center9)
        + mean_error_over(bundle, Scale::Medium, &all))
        / 2.0;
    let outer = -mean_error_over(bundle, Scale::Coarse, &all);

    RewardSet { parallel, foveal, inner, outer }
}

/// Per-channel running z-score over bias-corrected exponential moving
/// averages of the reward and its square. Each sample is normalized against
/// the statistics from before it, then the statistics advance. A channel's
/// first sample carries no information and normalizes to zero; without the
/// bias correction the cold-start prior would feed the critic a sustained
/// false reward offset for the first few thousand steps, long enough for
/// the actor to lock onto an arbitrary action.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNormalizer {
    pub params: NormalizerParams,
    m1: [f64; NUM_REWARD_CHANNELS],
    m2: [f64; NUM_REWARD_CHANNELS],
    /// (1 - rate)^samples per channel; 1 before the first sample.
    decay: [f64; NUM_REWARD_CHANNELS],
}

impl RewardNormalizer {
    pub fn new(params: NormalizerParams) -> Self {
        Self {
            params,
            m1: [0.0; NUM_REWARD_CHANNELS],
            m2: [0.0; NUM_REWARD_CHANNELS],
            decay: [1.0; NUM_REWARD_CHANNELS],
        }
    }

    pub fn from_parts(
        params: NormalizerParams,
        m1: [f64; NUM_REWARD_CHANNELS],
        m2: [f64; NUM_REWARD_CHANNELS],
        decay: [f64; NUM_REWARD_CHANNELS],
    ) -> Self {
        assert!(m1.iter().chain(&m2).all(|v| v.is_finite()));
        assert!(decay.iter().all(|&d| (0.0..=1.0).contains(&d)));
        Self { params, m1, m2, decay }
    }

    #[allow(clippy::type_complexity)]
    pub fn state(
        &self,
    ) -> (
        [f64; NUM_REWARD_CHANNELS],
        [f64; NUM_REWARD_CHANNELS],
        [f64; NUM_REWARD_CHANNELS],
    ) {
        (self.m1, self.m2, self.decay)
    }

    pub fn normalize_then_update(&mut self, ch: RewardChannel, r: f64) -> f64 {
        let i = ch as usize;
        let correction = 1.0 - self.decay[i];
        let normalized = if correction > 0.0 {
            let mean = self.m1[i] / correction;
            let var = (self.m2[i] / correction - mean * mean).max(self.params.floor);
            ((r - mean) / var.sqrt()).clamp(-self.params.clip, self.params.clip)
        } else {
            0.0
        };
        let rate = self.params.rate;
        self.m1[i] += rate * (r - self.m1[i]);
        self.m2[i] += rate * (r * r - self.m2[i]);
        self.decay[i] *= 1.0 - rate;
        normalized
    }
}

/// Critic and advantage state owned by one policy network.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticState<T> {
    /// Value weights, one per feature.
    pub v: Vec<T>,
    /// Advantage weights, actions x features flattened like the policy.
    pub w: Vec<T>,
    pub z_v: Vec<T>,
    pub z_w: Vec<T>,
}

impl<T: Float> CriticState<T> {
    pub fn new(actions: usize, dim: usize) -> Self {
        Self {
            v: vec![T::default(); dim],
            w: vec![T::default(); actions * dim],
            z_v: vec![T::default(); dim],
            z_w: vec![T::default(); actions * dim],
        }
    }

    /// Eligibility traces reset at every fixation onset.
    pub fn reset_traces(&mut self) {
        self.z_v.fill(T::default());
        self.z_w.fill(T::default());
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for n in 0..a.len() {
        acc += (a[n] * b[n]).f64();
    }
    acc
}

/// Score function of the linear softmax policy at (features, action),
/// flattened actions x features. Used directly by tests; `nac_step`
/// computes the same values without materializing the matrix product.
pub fn compatible_features<T: Float>(
    net: &PolicyNetwork<T>,
    features: &[T],
    action: usize,
) -> Vec<T> {
    let p = net.distribution(features);
    let inv_temp = T::one() / net.temperature();
    let mut psi = vec![T::default(); net.actions() * net.dim()];
    for a in 0..net.actions() {
        let indicator = if a == action { T::one() } else { T::default() };
        let g = (indicator - p[a]) * inv_temp;
        for d in 0..net.dim() {
            psi[a * net.dim() + d] = g * features[d];
        }
    }
    psi
}

/// One natural actor-critic update. `reward_norm` must already be
/// normalized; `f_next` is `None` on the final step of a fixation, which
/// drops the bootstrap term. Traces decay by lambda*gamma and accumulate
/// the current step's features/score.
pub fn nac_step<T: Float>(
    critic: &mut CriticState<T>,
    net: &mut PolicyNetwork<T>,
    f_t: &[T],
    action: usize,
    reward_norm: f64,
    f_next: Option<&[T]>,
    params: &NacParams,
) {
    let dim = net.dim();
    let actions = net.actions();
    assert_eq!(f_t.len(), dim);
    assert_eq!(critic.v.len(), dim);
    assert_eq!(critic.w.len(), actions * dim);

    let p = net.distribution(f_t);
    let value_t = dot(&critic.v, f_t);
    let delta = match f_next {
        Some(fnx) => reward_norm + params.gamma * dot(&critic.v, fnx) - value_t,
        None => reward_norm - value_t,
    };
    assert!(delta.is_finite(), "non-finite temporal-difference error");

    // Critic: decay-and-accumulate the trace first, then step the value
    // weights along the fresh trace.
    let decay = T::c(params.lambda * params.gamma);
    for n in 0..dim {
        critic.z_v[n] = decay * critic.z_v[n] + f_t[n];
    }
    let ac_delta = T::c(params.alpha_critic * delta);
    for n in 0..dim {
        critic.v[n] += ac_delta * critic.z_v[n];
    }

    // Advantage: psi = g (outer) f_t with g[a] = (1{a} - p[a]) / T, so
    // psi' w reduces to per-action row dots.
    let inv_temp = 1.0 / net.temperature().f64();
    let mut psi_dot_w = 0.0f64;
    for a in 0..actions {
        let indicator = if a == action { 1.0 } else { 0.0 };
        let g = (indicator - p[a].f64()) * inv_temp;
        psi_dot_w += g * dot(&critic.w[a * dim..(a + 1) * dim], f_t);
    }
    let residual = delta - psi_dot_w;
    assert!(residual.is_finite(), "non-finite advantage residual");
    for a in 0..actions {
        let indicator = if a == action { 1.0 } else { 0.0 };
        let g = (indicator - p[a].f64()) * inv_temp;
        let gw = T::c(params.alpha_advantage * residual * g);
        let gz = T::c(g);
        let wrow = &mut critic.w[a * dim..(a + 1) * dim];
        let zrow = &mut critic.z_w[a * dim..(a + 1) * dim];
        for n in 0..dim {
            wrow[n] += gw * f_t[n];
            zrow[n] = decay * zrow[n] + gz * f_t[n];
        }
    }

    // Actor: natural-gradient step along the updated advantage weights.
    let aa = T::c(params.alpha_actor);
    let weights = net.weights_mut();
    for n in 0..actions * dim {
        weights[n] += aa * critic.w[n];
    }
}

/// One policy network bundled with its learning state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkUnit<T> {
    pub net: PolicyNetwork<T>,
    pub critic: CriticState<T>,
}

impl<T: Float> NetworkUnit<T> {
    pub fn new(actions: usize, dim: usize, temperature: T) -> Self {
        Self {
            net: PolicyNetwork::zeros(actions, dim, temperature),
            critic: CriticState::new(actions, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelAgent<T> {
    pub unit: NetworkUnit<T>,
    pub normalizer: RewardNormalizer,
    pub nac: NacParams,
}

impl<T: Float> ParallelAgent<T> {
    pub fn new(temperature: T, nac: NacParams, norm: NormalizerParams) -> Self {
        Self {
            unit: NetworkUnit::new(NUM_ACTIONS, DIM_PARALLEL, temperature),
            normalizer: RewardNormalizer::new(norm),
            nac,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalAgent<T> {
    pub top: NetworkUnit<T>,
    pub foveal: NetworkUnit<T>,
    pub inner: NetworkUnit<T>,
    pub outer: NetworkUnit<T>,
    pub normalizer: RewardNormalizer,
    pub nac: NacParams,
}

impl<T: Float> HierarchicalAgent<T> {
    pub fn new(temperature: T, nac: NacParams, norm: NormalizerParams) -> Self {
        Self {
            top: NetworkUnit::new(NUM_OPTIONS, DIM_PARALLEL, temperature),
            foveal: NetworkUnit::new(NUM_ACTIONS, DIM_FOVEAL, temperature),
            inner: NetworkUnit::new(NUM_ACTIONS, DIM_INNER, temperature),
            outer: NetworkUnit::new(NUM_ACTIONS, DIM_OUTER, temperature),
            normalizer: RewardNormalizer::new(norm),
            nac,
        }
    }

    pub fn bottom(&self, option: OptionKind) -> &NetworkUnit<T> {
        match option {
            OptionKind::Foveal => &self.foveal,
            OptionKind::InnerPeripheral => &self.inner,
            OptionKind::OuterPeripheral => &self.outer,
        }
    }

    fn bottom_mut(&mut self, option: OptionKind) -> &mut NetworkUnit<T> {
        match option {
            OptionKind::Foveal => &mut self.foveal,
            OptionKind::InnerPeripheral => &mut self.inner,
            OptionKind::OuterPeripheral => &mut self.outer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Agent<T> {
    Parallel(ParallelAgent<T>),
    Hierarchical(HierarchicalAgent<T>),
}

impl<T: Float> Agent<T> {
    /// Called at every fixation onset: fixations are episodes.
    pub fn reset_traces(&mut self) {
        match self {
            Agent::Parallel(a) => a.unit.critic.reset_traces(),
            Agent::Hierarchical(a) => {
                a.top.critic.reset_traces();
                a.foveal.critic.reset_traces();
                a.inner.critic.reset_traces();
                a.outer.critic.reset_traces();
            }
        }
    }
}

/// Everything observable about one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub action_index: usize,
    pub delta: i32,
    /// Selected option for hierarchical agents.
    pub option_index: Option<usize>,
    pub rewards: RewardSet,
    pub residual_before: f64,
    pub residual_after: f64,
    pub vergence_after: i32,
}

/// One closed-loop training step for the parallel agent: encode the current
/// input, sample an action, act, encode the new input (rewards and the
/// bootstrap features come from it, on the pre-update dictionaries), update
/// the dictionaries from the new input, then take the actor-critic step.
/// Consumes exactly one rng draw.
#[allow(clippy::too_many_arguments)]
pub fn train_step_parallel<T: Float>(
    agent: &mut ParallelAgent<T>,
    dicts: &mut DictionarySet<T>,
    scene: &StereoScene<T>,
    gaze: &mut GazeState,
    pyramid: &mut PyramidInput<T>,
    env_params: &EnvParams,
    final_step: bool,
    rng: &mut ChaCha8Rng,
) -> StepDiagnostics {
    let bundle_t = encode_pyramid(dicts, pyramid);
    let features_t = assemble_features(&bundle_t);
    let decision = act_parallel(&agent.unit.net, &features_t, ActionMode::Sample, rng);

    let residual_before = env::residual_disparity(scene, gaze);
    let gaze_next = env::apply_action(*gaze, decision.delta, env_params)
        .expect("action set is closed under the policy");
    let pyramid_next = extract_pyramid(scene, &gaze_next);
    let bundle_next = encode_pyramid(dicts, &pyramid_next);
    let rewards = compute_rewards(&bundle_next);
    let features_next = assemble_features(&bundle_next);

    dicts.update_from_pyramid(&pyramid_next);

    let r_norm = agent
        .normalizer
        .normalize_then_update(RewardChannel::Parallel, rewards.parallel);
    let f_next = if final_step { None } else { Some(features_next.parallel.as_slice()) };
    nac_step(
        &mut agent.unit.critic,
        &mut agent.unit.net,
        &features_t.parallel,
        decision.action_index,
        r_norm,
        f_next,
        &agent.nac,
    );

    *gaze = gaze_next;
    *pyramid = pyramid_next;
    StepDiagnostics {
        action_index: decision.action_index,
        delta: decision.delta,
        option_index: None,
        rewards,
        residual_before,
        residual_after: env::residual_disparity(scene, gaze),
        vergence_after: gaze.vergence,
    }
}

/// Hierarchical training step. The selector updates every step from the
/// shared reward channel; only the selected bottom network updates, from
/// its own channel, so every per-network gradient stays on-policy. All four
/// reward channels' normalizer statistics advance every step. Consumes two
/// rng draws.
#[allow(clippy::too_many_arguments)]
pub fn train_step_hierarchical<T: Float>(
    agent: &mut HierarchicalAgent<T>,
    dicts: &mut DictionarySet<T>,
    scene: &StereoScene<T>,
    gaze: &mut GazeState,
    pyramid: &mut PyramidInput<T>,
    env_params: &EnvParams,
    final_step: bool,
    rng: &mut ChaCha8Rng,
) -> StepDiagnostics {
    let bundle_t = encode_pyramid(dicts, pyramid);
    let features_t = assemble_features(&bundle_t);
    let decision = act_hierarchical(
        &agent.top.net,
        &agent.foveal.net,
        &agent.inner.net,
        &agent.outer.net,
        &features_t,
        ActionMode::Sample,
        rng,
    );
    let option = OptionKind::from_index(decision.option_index);

    let residual_before = env::residual_disparity(scene, gaze);
    let gaze_next = env::apply_action(*gaze, decision.delta, env_params)
        .expect("action set is closed under the policy");
    let pyramid_next = extract_pyramid(scene, &gaze_next);
    let bundle_next = encode_pyramid(dicts, &pyramid_next);
    let rewards = compute_rewards(&bundle_next);
    let features_next = assemble_features(&bundle_next);

    dicts.update_from_pyramid(&pyramid_next);

    // Fixed channel order keeps the normalizer state independent of which
    // option happened to be selected.
    let r_parallel = agent
        .normalizer
        .normalize_then_update(RewardChannel::Parallel, rewards.parallel);
    let r_foveal = agent
        .normalizer
        .normalize_then_update(RewardChannel::Foveal, rewards.foveal);
    let r_inner = agent
        .normalizer
        .normalize_then_update(RewardChannel::Inner, rewards.inner);
    let r_outer = agent
        .normalizer
        .normalize_then_update(RewardChannel::Outer, rewards.outer);

    let f_top_next = if final_step { None } else { Some(features_next.selector()) };
    nac_step(
        &mut agent.top.critic,
        &mut agent.top.net,
        features_t.selector(),
        decision.option_index,
        r_parallel,
        f_top_next,
        &agent.nac,
    );

    let r_bottom = match option {
        OptionKind::Foveal => r_foveal,
        OptionKind::InnerPeripheral => r_inner,
        OptionKind::OuterPeripheral => r_outer,
    };
    let nac = agent.nac;
    let f_bot = features_t.for_option(option).to_vec();
    let f_bot_next = if final_step {
        None
    } else {
        Some(features_next.for_option(option).to_vec())
    };
    let unit = agent.bottom_mut(option);
    nac_step(
        &mut unit.critic,
        &mut unit.net,
        &f_bot,
        decision.action_index,
        r_bottom,
        f_bot_next.as_deref(),
        &nac,
    );

    *gaze = gaze_next;
    *pyramid = pyramid_next;
    StepDiagnostics {
        action_index: decision.action_index,
        delta: decision.delta,
        option_index: Some(decision.option_index),
        rewards,
        residual_before,
        residual_after: env::residual_disparity(scene, gaze),
        vergence_after: gaze.vergence,
    }
}

/// Dispatch over the two architectures.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Float>(
    agent: &mut Agent<T>,
    dicts: &mut DictionarySet<T>,
    scene: &StereoScene<T>,
    gaze: &mut GazeState,
    pyramid: &mut PyramidInput<T>,
    env_params: &EnvParams,
    final_step: bool,
    rng: &mut ChaCha8Rng,
) -> StepDiagnostics {
    match agent {
        Agent::Parallel(a) => {
            train_step_parallel(a, dicts, scene, gaze, pyramid, env_params, final_step, rng)
        }
        Agent::Hierarchical(a) => {
            train_step_hierarchical(a, dicts, scene, gaze, pyramid, env_params, final_step, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gassom::DICT_SIZE;
    use crate::seeds;
    use crate::VERGENCE_ACTIONS;
    use rand::Rng;

    /// Bundle with constant per-scale errors, every patch valid.
    fn bundle_with_errors(fine: f64, medium: f64, coarse: f64) -> FeatureBundle<f64> {
        let per = 3 * PATCHES_PER_SCALE;
        let mut errors = vec![0.0f64; per];
        errors[..PATCHES_PER_SCALE].fill(fine);
        errors[PATCHES_PER_SCALE..2 * PATCHES_PER_SCALE].fill(medium);
        errors[2 * PATCHES_PER_SCALE..].fill(coarse);
        FeatureBundle::from_parts(
            vec![0.0; per * DICT_SIZE],
            errors,
            vec![0; per],
            vec![true; per],
        )
    }

    #[test]
    fn reward_hand_example() {
        let r = compute_rewards(&bundle_with_errors(0.1, 0.2, 0.3));
        assert!((r.parallel - (-0.2)).abs() < 1e-12);
        assert!((r.foveal - (-0.2)).abs() < 1e-12);
        assert!((r.inner - (-0.25)).abs() < 1e-12);
        assert!((r.outer - (-0.3)).abs() < 1e-12);
        assert_eq!(r.selector(), r.parallel);
    }

    #[test]
    fn reward_extremes() {
        let zero = compute_rewards(&bundle_with_errors(0.0, 0.0, 0.0));
        assert_eq!(
            (zero.parallel, zero.foveal, zero.inner, zero.outer),
            (0.0, 0.0, 0.0, 0.0)
        );
        let one = compute_rewards(&bundle_with_errors(1.0, 1.0, 1.0));
        for r in [one.parallel, one.foveal, one.inner, one.outer] {
            assert!((r - (-1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rewards_stay_bounded_for_any_errors_and_validity() {
        let mut rng = seeds::stream(1, "test", &[]);
        let per = 3 * PATCHES_PER_SCALE;
        for _ in 0..200 {
            let errors: Vec<f64> = (0..per).map(|_| rng.gen::<f64>()).collect();
            let valid: Vec<bool> = (0..per).map(|_| rng.gen::<f64>() < 0.7).collect();
            let bundle = FeatureBundle::from_parts(
                vec![0.0; per * DICT_SIZE],
                errors,
                vec![0; per],
                valid,
            );
            let r = compute_rewards(&bundle);
            for v in [r.parallel, r.foveal, r.inner, r.outer] {
                assert!((-1.0..=0.0).contains(&v), "reward {v} out of range");
            }
        }
    }

    #[test]
    fn invalid_patches_adjust_denominators() {
        let per = 3 * PATCHES_PER_SCALE;
        let mut errors = vec![0.0f64; per];
        let mut valid = vec![false; per];
        // Two valid coarse patches with errors 0.4 and 0.8.
        errors[2 * PATCHES_PER_SCALE] = 0.4;
        errors[2 * PATCHES_PER_SCALE + 1] = 0.8;
        valid[2 * PATCHES_PER_SCALE] = true;
        valid[2 * PATCHES_PER_SCALE + 1] = true;
        let bundle =
            FeatureBundle::from_parts(vec![0.0; per * DICT_SIZE], errors, vec![0; per], valid);
        let r = compute_rewards(&bundle);
        assert!((r.outer - (-0.6)).abs() < 1e-12);
        assert!((r.parallel - (-0.6)).abs() < 1e-12);
        // Foveal: invalid coarse center and empty medium group contribute
        // zero; the fine group is empty too.
        assert_eq!(r.foveal, 0.0);
    }

    #[test]
    fn normalizer_first_sample_is_silent_and_constants_stay_silent() {
        let mut n = RewardNormalizer::new(NormalizerParams::default());
        assert_eq!(n.normalize_then_update(RewardChannel::Parallel, -0.4), 0.0);
        // A constant stream never deviates from its own mean; only floating
        // point residue divided by the floored deviation remains.
        for _ in 0..100 {
            let z = n.normalize_then_update(RewardChannel::Parallel, -0.4);
            assert!(z.abs() < 1e-9, "z = {z}");
        }
    }

    #[test]
    fn normalizer_clips_variance_collapse_spikes() {
        let mut n = RewardNormalizer::new(NormalizerParams::default());
        n.normalize_then_update(RewardChannel::Outer, -0.5);
        // Second sample: the variance estimate is still at the floor, so the
        // raw z-score would be huge; the clip bounds it.
        let z = n.normalize_then_update(RewardChannel::Outer, -0.3);
        assert_eq!(z, NormalizerParams::default().clip);
        // With two samples absorbed the variance estimate is real again and
        // deviations score on the usual z scale.
        let z = n.normalize_then_update(RewardChannel::Outer, -0.9);
        assert!(z < -1.0 && z >= -NormalizerParams::default().clip, "z = {z}");
    }

    #[test]
    fn normalizer_is_unbiased_from_the_start() {
        // Bias check: no sustained offset even in the warm-up window. The
        // mean of early z-scores over a symmetric stream stays near zero.
        let mut n = RewardNormalizer::new(NormalizerParams::default());
        let mut rng = seeds::stream(7, "test", &[]);
        let mut sum = 0.0;
        let steps = 2000;
        for _ in 0..steps {
            let r = -0.5 + 0.1 * (rng.gen::<f64>() - 0.5);
            sum += n.normalize_then_update(RewardChannel::Inner, r);
        }
        let mean_z = sum / steps as f64;
        assert!(mean_z.abs() < 0.2, "warm-up bias {mean_z}");
    }

    #[test]
    fn normalizer_tracks_a_stationary_stream() {
        let mut n =
            RewardNormalizer::new(NormalizerParams { rate: 1e-2, ..NormalizerParams::default() });
        let mut rng = seeds::stream(2, "test", &[]);
        let mut last = 0.0;
        for _ in 0..20_000 {
            let r = -0.5 + 0.1 * (rng.gen::<f64>() - 0.5);
            last = n.normalize_then_update(RewardChannel::Foveal, r);
        }
        let (m1, _, decay) = n.state();
        let i = RewardChannel::Foveal as usize;
        let mean = m1[i] / (1.0 - decay[i]);
        assert!((mean + 0.5).abs() < 0.01);
        assert!(last.abs() < 5.0, "normalized values stay O(1)");
    }

    #[test]
    fn nac_fixed_point_leaves_weights_unchanged() {
        let mut unit = NetworkUnit::<f64>::new(3, 4, 1.0);
        let f = vec![0.5, -0.25, 1.0, 0.0];
        // v = 0 and reward 0 give delta = 0; w = 0 keeps the actor still.
        nac_step(
            &mut unit.critic,
            &mut unit.net,
            &f,
            1,
            0.0,
            Some(&f),
            &NacParams::default(),
        );
        assert!(unit.net.weights().iter().all(|&w| w == 0.0));
        assert!(unit.critic.v.iter().all(|&v| v == 0.0));
        assert!(unit.critic.w.iter().all(|&w| w == 0.0));
        // Traces still accumulated the step.
        assert_eq!(unit.critic.z_v, f);
    }

    #[test]
    fn first_step_after_reset_uses_features_as_value_trace() {
        let mut unit = NetworkUnit::<f64>::new(2, 3, 1.0);
        let f0 = vec![1.0, 2.0, 3.0];
        nac_step(&mut unit.critic, &mut unit.net, &f0, 0, 0.3, None, &NacParams::default());
        unit.critic.reset_traces();
        let f1 = vec![-1.0, 0.5, 2.0];
        nac_step(&mut unit.critic, &mut unit.net, &f1, 1, 0.1, None, &NacParams::default());
        // z_v = lambda*gamma*0 + f1 exactly.
        assert_eq!(unit.critic.z_v, f1);
    }

    #[test]
    fn compatible_features_match_finite_differences() {
        let mut rng = seeds::stream(3, "test", &[]);
        let (actions, dim) = (4, 5);
        let weights: Vec<f64> = (0..actions * dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let features: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let temp = 0.7;
        let net = PolicyNetwork::from_parts(actions, dim, temp, weights.clone());
        let action = 2;
        let psi = compatible_features(&net, &features, action);

        let h = 1e-6;
        let mut worst_rel = 0.0f64;
        for idx in 0..actions * dim {
            let mut wp = weights.clone();
            wp[idx] += h;
            let mut wm = weights.clone();
            wm[idx] -= h;
            let lp = PolicyNetwork::from_parts(actions, dim, temp, wp)
                .distribution(&features)[action]
                .ln();
            let lm = PolicyNetwork::from_parts(actions, dim, temp, wm)
                .distribution(&features)[action]
                .ln();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            worst_rel = worst_rel.max((psi[idx] - fd).abs() / denom);
        }
        assert!(worst_rel < 1e-4, "max relative error {worst_rel}");
    }

    #[test]
    fn bandit_concentrates_on_the_rewarded_action() {
        // Single state, two actions, reward 1 for action 0 and 0 otherwise;
        // every step is its own episode.
        let mut unit = NetworkUnit::<f64>::new(2, 1, 1.0);
        let mut norm = RewardNormalizer::new(NormalizerParams::default());
        let nac = NacParams::default();
        let f = vec![1.0];
        let mut rng = seeds::stream(4, "test", &[]);
        for _ in 0..5000 {
            unit.critic.reset_traces();
            let p = unit.net.distribution(&f);
            let action = crate::policy::sample_action(&p, &mut rng);
            let r = if action == 0 { 1.0 } else { 0.0 };
            let r_norm = norm.normalize_then_update(RewardChannel::Parallel, r);
            nac_step(&mut unit.critic, &mut unit.net, &f, action, r_norm, None, &nac);
        }
        let p = unit.net.distribution(&f);
        assert!(p[0] > 0.95, "p(best) = {} after 5k steps", p[0]);
    }

    #[test]
    fn one_step_critic_converges_to_mean_reward() {
        let params = NacParams { gamma: 0.0, lambda: 0.0, ..NacParams::default() };
        let mut unit = NetworkUnit::<f64>::new(2, 1, 1.0);
        let f = vec![1.0];
        let mut rng = seeds::stream(5, "test", &[]);
        for _ in 0..8000 {
            unit.critic.reset_traces();
            let r = 0.3 + 0.2 * (rng.gen::<f64>() - 0.5);
            nac_step(&mut unit.critic, &mut unit.net, &f, 0, r, None, &params);
        }
        let v = unit.critic.v[0];
        assert!((v - 0.3).abs() < 0.05, "v = {v}");
    }

    #[test]
    fn selection_is_uniform_at_zero_weights() {
        let per = 3 * PATCHES_PER_SCALE;
        let bundle = FeatureBundle::from_parts(
            vec![0.1f64; per * DICT_SIZE],
            vec![0.5; per],
            vec![0; per],
            vec![true; per],
        );
        let f = assemble_features(&bundle);
        let agent = HierarchicalAgent::<f64>::new(1.0, NacParams::default(), NormalizerParams::default());
        let mut rng = seeds::stream(6, "test", &[]);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let d = act_hierarchical(
                &agent.top.net,
                &agent.foveal.net,
                &agent.inner.net,
                &agent.outer.net,
                &f,
                ActionMode::Sample,
                &mut rng,
            );
            counts[d.option_index] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / 3000.0;
            assert!((frac - 1.0 / 3.0).abs() < 0.05, "selection fraction {frac}");
        }
    }

    fn training_fixture(
        seed: u64,
    ) -> (
        StereoScene<f32>,
        GazeState,
        PyramidInput<f32>,
        DictionarySet<f32>,
        EnvParams,
    ) {
        use crate::env::{generate_scene, SceneSpec};
        use crate::gassom::GassomParams;
        let env_params = EnvParams::default();
        let scene = generate_scene::<f32>(
            &SceneSpec {
                rows: 384,
                cols: 384,
                background_disparity: 3.0,
                ..SceneSpec::default()
            },
            &env_params,
            seed,
        )
        .unwrap();
        let gaze = GazeState { fixation: (192, 192), vergence: -2 };
        let pyramid = extract_pyramid(&scene, &gaze);
        let dicts = DictionarySet::<f32>::init(GassomParams::default(), seed);
        (scene, gaze, pyramid, dicts, env_params)
    }

    #[test]
    fn parallel_training_step_is_deterministic() {
        let run = || {
            let (scene, mut gaze, mut pyr, mut dicts, env_params) = training_fixture(7);
            let mut agent =
                ParallelAgent::<f32>::new(1.0, NacParams::default(), NormalizerParams::default());
            let mut rng = seeds::stream(8, "step", &[]);
            let mut out = Vec::new();
            for step in 0..3 {
                out.push(train_step_parallel(
                    &mut agent,
                    &mut dicts,
                    &scene,
                    &mut gaze,
                    &mut pyr,
                    &env_params,
                    step == 2,
                    &mut rng,
                ));
            }
            (out, agent, dicts)
        };
        let (a, agent_a, dicts_a) = run();
        let (b, agent_b, dicts_b) = run();
        assert_eq!(a, b);
        assert_eq!(agent_a, agent_b);
        assert_eq!(dicts_a.fine.bases(), dicts_b.fine.bases());
    }

    #[test]
    fn unselected_bottom_networks_stay_frozen() {
        let (scene, mut gaze, mut pyr, mut dicts, env_params) = training_fixture(9);
        let mut agent = HierarchicalAgent::<f32>::new(
            1.0,
            NacParams::default(),
            NormalizerParams::default(),
        );
        // Pin the selector to OP: bias its third row using huge weights.
        for w in agent.top.net.weights_mut()[2 * DIM_PARALLEL..].iter_mut() {
            *w = 1e4;
        }
        let fov_before = agent.foveal.clone();
        let inn_before = agent.inner.clone();
        let out_before = agent.outer.clone();
        let mut rng = seeds::stream(10, "step", &[]);
        let d = train_step_hierarchical(
            &mut agent,
            &mut dicts,
            &scene,
            &mut gaze,
            &mut pyr,
            &env_params,
            false,
            &mut rng,
        );
        assert_eq!(d.option_index, Some(OptionKind::OuterPeripheral.index()));
        assert_eq!(agent.foveal, fov_before);
        assert_eq!(agent.inner, inn_before);
        assert_ne!(agent.outer, out_before);
    }

    #[test]
    fn executed_delta_is_always_in_the_action_set() {
        let (scene, mut gaze, mut pyr, mut dicts, env_params) = training_fixture(11);
        let mut agent = HierarchicalAgent::<f32>::new(
            1.0,
            NacParams::default(),
            NormalizerParams::default(),
        );
        let mut rng = seeds::stream(12, "step", &[]);
        for step in 0..5 {
            let d = train_step_hierarchical(
                &mut agent,
                &mut dicts,
                &scene,
                &mut gaze,
                &mut pyr,
                &env_params,
                step == 4,
                &mut rng,
            );
            assert!(VERGENCE_ACTIONS.contains(&d.delta));
            assert_eq!(d.delta, VERGENCE_ACTIONS[d.action_index]);
        }
    }
}
