//! Pooled feature assembly and softmax action selection for both control
//! architectures.
//!
//! The parallel architecture maps one pooled feature vector to the 11
//! vergence actions. The hierarchical architecture runs three bottom
//! networks on regional feature vectors — foveal (F), inner peripheral
//! (IP), outer peripheral (OP) — plus a top-level selector that picks which
//! bottom command executes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gassom::{FeatureBundle, DICT_SIZE};
use crate::pyramid::{patch_index, Scale, PATCHES_PER_SCALE};
use crate::{Float, VERGENCE_ACTIONS};

/// Feature dimensions per network.
pub const DIM_PARALLEL: usize = 3 * DICT_SIZE;
pub const DIM_FOVEAL: usize = 3 * DICT_SIZE;
pub const DIM_INNER: usize = 2 * DICT_SIZE;
pub const DIM_OUTER: usize = DICT_SIZE;
pub const NUM_ACTIONS: usize = VERGENCE_ACTIONS.len();
pub const NUM_OPTIONS: usize = 3;

/// Bottom-level command regions in selector output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptionKind {
    Foveal,
    InnerPeripheral,
    OuterPeripheral,
}

impl OptionKind {
    pub const ALL: [OptionKind; NUM_OPTIONS] = [
        OptionKind::Foveal,
        OptionKind::InnerPeripheral,
        OptionKind::OuterPeripheral,
    ];

    pub fn index(self) -> usize {
        match self {
            OptionKind::Foveal => 0,
            OptionKind::InnerPeripheral => 1,
            OptionKind::OuterPeripheral => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn label(self) -> &'static str {
        match self {
            OptionKind::Foveal => "F",
            OptionKind::InnerPeripheral => "IP",
            OptionKind::OuterPeripheral => "OP",
        }
    }
}

/// The five pooled feature vectors; the selector input aliases the parallel
/// one.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures<T> {
    /// [coarse pool; medium pool; fine pool], each the mean of 49 energies.
    pub parallel: Vec<T>,
    /// [coarse center energy; mean of central 3x3 medium; mean of 49 fine].
    pub foveal: Vec<T>,
    /// [mean of central 3x3 coarse; mean of 49 medium].
    pub inner: Vec<T>,
    /// Mean of 49 coarse energies.
    pub outer: Vec<T>,
}

impl<T: Float> PooledFeatures<T> {
    /// Selector input F_O, identical to the parallel feature vector.
    pub fn selector(&self) -> &[T] {
        &self.parallel
    }

    pub fn for_option(&self, option: OptionKind) -> &[T] {
        match option {
            OptionKind::Foveal => &self.foveal,
            OptionKind::InnerPeripheral => &self.inner,
            OptionKind::OuterPeripheral => &self.outer,
        }
    }
}

/// Mean of the energy vectors of the valid patches among `indices`;
/// zero vector when none are valid.
fn mean_pool<T: Float>(bundle: &FeatureBundle<T>, scale: Scale, indices: &[usize]) -> Vec<T> {
    let mut acc = vec![T::default(); DICT_SIZE];
    let mut count = 0usize;
    for &idx in indices {
        if !bundle.is_valid(scale, idx) {
            continue;
        }
        for (a, &e) in acc.iter_mut().zip(bundle.energy(scale, idx)) {
            *a += e;
        }
        count += 1;
    }
    if count > 0 {
        let inv = T::c(1.0 / count as f64);
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    acc
}

fn center_3x3() -> Vec<usize> {
    let mut v = Vec::with_capacity(9);
    for i in -1..=1 {
        for j in -1..=1 {
            v.push(patch_index(i, j));
        }
    }
    v
}

/// Builds all pooled feature vectors from one encoded pyramid.
pub fn assemble_features<T: Float>(bundle: &FeatureBundle<T>) -> PooledFeatures<T> {
    let all: Vec<usize> = (0..PATCHES_PER_SCALE).collect();
    let center9 = center_3x3();
    let center = patch_index(0, 0);

    let coarse49 = mean_pool(bundle, Scale::Coarse, &all);
    let medium49 = mean_pool(bundle, Scale::Medium, &all);
    let fine49 = mean_pool(bundle, Scale::Fine, &all);
    let coarse9 = mean_pool(bundle, Scale::Coarse, &center9);
    let medium9 = mean_pool(bundle, Scale::Medium, &center9);
    // The foveal top block is the coarse center patch's own energy vector;
    // if that patch is invalid its energies are already zero.
    let coarse_center = bundle.energy(Scale::Coarse, center).to_vec();

    let mut parallel = Vec::with_capacity(DIM_PARALLEL);
    parallel.extend_from_slice(&coarse49);
    parallel.extend_from_slice(&medium49);
    parallel.extend_from_slice(&fine49);

    let mut foveal = Vec::with_capacity(DIM_FOVEAL);
    foveal.extend_from_slice(&coarse_center);
    foveal.extend_from_slice(&medium9);
    foveal.extend_from_slice(&fine49);

    let mut inner = Vec::with_capacity(DIM_INNER);
    inner.extend_from_slice(&coarse9);
    inner.extend_from_slice(&medium49);

    PooledFeatures { parallel, foveal, inner, outer: coarse49 }
}

/// Linear-softmax policy over a discrete action set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork<T> {
    actions: usize,
    dim: usize,
    temperature: T,
    /// Row-major `actions x dim`.
    weights: Vec<T>,
}

impl<T: Float> PolicyNetwork<T> {
    /// Zero initialization: the initial policy is uniform.
    pub fn zeros(actions: usize, dim: usize, temperature: T) -> Self {
        assert!(temperature > T::default(), "temperature must be positive");
        Self { actions, dim, temperature, weights: vec![T::default(); actions * dim] }
    }

    pub fn from_parts(actions: usize, dim: usize, temperature: T, weights: Vec<T>) -> Self {
        assert!(temperature > T::default());
        assert_eq!(weights.len(), actions * dim);
        assert!(
            weights.iter().all(|w| w.f64().is_finite()),
            "non-finite policy weights"
        );
        Self { actions, dim, temperature, weights }
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn activations(&self, features: &[T]) -> Vec<T> {
        assert_eq!(features.len(), self.dim, "feature dimension mismatch");
        let mut a = vec![T::default(); self.actions];
        for (row, out) in a.iter_mut().enumerate() {
            let w = &self.weights[row * self.dim..(row + 1) * self.dim];
            let mut acc = T::default();
            for n in 0..self.dim {
                acc += w[n] * features[n];
            }
            assert!(acc.f64().is_finite(), "non-finite activation");
            *out = acc;
        }
        a
    }

    pub fn distribution(&self, features: &[T]) -> Vec<T> {
        softmax(&self.activations(features), self.temperature)
    }
}

/// Temperature softmax with max-subtraction.
pub fn softmax<T: Float>(activations: &[T], temperature: T) -> Vec<T> {
    assert!(temperature > T::default());
    let mut max = T::neg_infinity();
    for &a in activations {
        if a > max {
            max = a;
        }
    }
    let mut p: Vec<T> = activations
        .iter()
        .map(|&a| ((a - max) / temperature).exp())
        .collect();
    let mut sum = T::default();
    for &v in &p {
        sum += v;
    }
    let inv = T::one() / sum;
    for v in p.iter_mut() {
        *v *= inv;
    }
    p
}

/// Multinomial draw from `p` using one uniform variate.
pub fn sample_action<T: Float>(p: &[T], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0f64;
    for (i, &v) in p.iter().enumerate() {
        cum += v.f64();
        if u < cum {
            return i;
        }
    }
    p.len() - 1
}

/// Argmax with ties broken by the smaller |magnitude|, then lower index.
fn greedy_by_magnitude<T: Float>(p: &[T], magnitudes: &[i32]) -> usize {
    assert_eq!(p.len(), magnitudes.len());
    let mut best = 0usize;
    for i in 1..p.len() {
        if p[i] > p[best]
            || (p[i] == p[best] && magnitudes[i].abs() < magnitudes[best].abs())
        {
            best = i;
        }
    }
    best
}

/// Greedy vergence action index under the magnitude tie rule.
pub fn greedy_action<T: Float>(p: &[T]) -> usize {
    greedy_by_magnitude(p, &VERGENCE_ACTIONS)
}

/// Greedy selector option, ties to the lowest index.
pub fn greedy_option<T: Float>(p: &[T]) -> usize {
    let mut best = 0usize;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Multinomial sampling (training).
    Sample,
    /// Greedy with deterministic tie-breaking (evaluation).
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelDecision<T> {
    pub action_index: usize,
    pub delta: i32,
    pub probabilities: Vec<T>,
}

/// One parallel-architecture action choice. Sampling consumes exactly one
/// draw from `rng`; greedy consumes none.
pub fn act_parallel<T: Float>(
    net: &PolicyNetwork<T>,
    features: &PooledFeatures<T>,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> ParallelDecision<T> {
    let p = net.distribution(&features.parallel);
    let action_index = match mode {
        ActionMode::Sample => sample_action(&p, rng),
        ActionMode::Greedy => greedy_action(&p),
    };
    ParallelDecision {
        action_index,
        delta: VERGENCE_ACTIONS[action_index],
        probabilities: p,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalDecision<T> {
    pub option_index: usize,
    /// Action index chosen by the selected bottom network; this is what
    /// executes.
    pub action_index: usize,
    pub delta: i32,
    pub p_top: Vec<T>,
    pub p_foveal: Vec<T>,
    pub p_inner: Vec<T>,
    pub p_outer: Vec<T>,
}

impl<T: Float> HierarchicalDecision<T> {
    pub fn p_bottom(&self, option: OptionKind) -> &[T] {
        match option {
            OptionKind::Foveal => &self.p_foveal,
            OptionKind::InnerPeripheral => &self.p_inner,
            OptionKind::OuterPeripheral => &self.p_outer,
        }
    }
}

/// One hierarchical action choice. Sampling consumes two draws (selector,
/// then the selected bottom network); greedy consumes none. All four
/// distributions are always computed and returned.
pub fn act_hierarchical<T: Float>(
    top: &PolicyNetwork<T>,
    foveal: &PolicyNetwork<T>,
    inner: &PolicyNetwork<T>,
    outer: &PolicyNetwork<T>,
    features: &PooledFeatures<T>,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> HierarchicalDecision<T> {
    let p_top = top.distribution(features.selector());
    let p_foveal = foveal.distribution(&features.foveal);
    let p_inner = inner.distribution(&features.inner);
    let p_outer = outer.distribution(&features.outer);

    let option_index = match mode {
        ActionMode::Sample => sample_action(&p_top, rng),
        ActionMode::Greedy => greedy_option(&p_top),
    };
    let p_sel = match OptionKind::from_index(option_index) {
        OptionKind::Foveal => &p_foveal,
        OptionKind::InnerPeripheral => &p_inner,
        OptionKind::OuterPeripheral => &p_outer,
    };
    let action_index = match mode {
        ActionMode::Sample => sample_action(p_sel, rng),
        ActionMode::Greedy => greedy_action(p_sel),
    };
    HierarchicalDecision {
        option_index,
        action_index,
        delta: VERGENCE_ACTIONS[action_index],
        p_top,
        p_foveal,
        p_inner,
        p_outer,
    }
}
