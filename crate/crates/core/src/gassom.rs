//! Online subspace dictionary learning and energy encoding.
//!
//! Each pyramid scale owns a dictionary of K = 324 two-dimensional
//! orthonormal subspaces of R^200 arranged on an 18x18 topological grid.
//! A stereo patch is encoded as its squared projection length onto every
//! subspace; the winning subspace's energy measures how well the patch is
//! explained, and `1 - energy` is the reconstruction error that drives both
//! dictionary learning and, negated, the agent's intrinsic reward.
//!
//! The update rule moves each subspace toward the current patch in
//! proportion to a topologically smoothed soft assignment: softmax
//! responsibilities over energies, blurred across the grid with a Gaussian
//! neighborhood whose width anneals over training, followed by a projected
//! gradient step and re-orthonormalization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::pyramid::{normalize_patch, PatchGrid, PyramidInput, Scale, PATCH_DIM, PATCH_SIZE};
use crate::{seeds, Float};

/// Subspaces per dictionary.
pub const DICT_SIZE: usize = 324;
/// Side of the square topological grid; DICT_SIZE = SOM_SIDE^2.
pub const SOM_SIDE: usize = 18;
/// Columns per basis matrix.
pub const SUBSPACE_DIM: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum GassomError {
    #[error("probe shift {0} exceeds the patch resolution limit of 9")]
    ProbeShiftTooLarge(i32),
}

/// Annealing and responsibility parameters. Neighborhood width and learning
/// rate decay geometrically from their initial values to their floors over
/// `anneal_steps` update calls, then hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GassomParams {
    /// Softmax temperature for subspace responsibilities.
    pub tau: f64,
    pub sigma_init: f64,
    pub sigma_floor: f64,
    pub eta_init: f64,
    pub eta_floor: f64,
    pub anneal_steps: u64,
}

impl Default for GassomParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            sigma_init: 3.0,
            sigma_floor: 0.5,
            eta_init: 5e-3,
            eta_floor: 5e-4,
            anneal_steps: 50_000,
        }
    }
}

fn anneal(init: f64, floor: f64, t: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return floor;
    }
    let frac = (t.min(horizon) as f64) / horizon as f64;
    init * (floor / init).powf(frac)
}

/// Per-scale dictionary of two-dimensional subspaces. Basis `k` occupies
/// `bases[k*400 .. (k+1)*400]`: first column then second, 200 entries each.
/// Grid position of subspace `k` is `(k / 18, k % 18)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceDictionary<T> {
    pub scale: Scale,
    bases: Vec<T>,
    params: GassomParams,
    step_count: u64,
}

/// Energies of one patch against every subspace of one dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingResult<T> {
    pub energies: Vec<T>,
    pub winner: usize,
    pub error: T,
    pub valid: bool,
}

/// Batch summary returned by the dictionary update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateDiagnostics {
    /// Mean reconstruction error of the batch, each patch measured against
    /// the dictionary state it was updated from.
    pub mean_error: f64,
    pub patches: usize,
}

impl<T: Float> SubspaceDictionary<T> {
    /// Random initialization: standard-normal entries, orthonormalized.
    pub fn init(scale: Scale, params: GassomParams, seed: u64) -> Self {
        let mut rng = seeds::stream(seed, "dictionary-init", &[scale_slot(scale) as u64]);
        let mut bases = vec![T::default(); DICT_SIZE * SUBSPACE_DIM * PATCH_DIM];
        for v in bases.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = T::c(g);
        }
        let mut dict = Self { scale, bases, params, step_count: 0 };
        for k in 0..DICT_SIZE {
            dict.orthonormalize(k);
        }
        dict
    }

    /// Rebuilds a dictionary from serialized parts, re-checking shape and
    /// orthonormality.
    pub fn from_parts(
        scale: Scale,
        bases: Vec<T>,
        params: GassomParams,
        step_count: u64,
    ) -> Self {
        assert_eq!(bases.len(), DICT_SIZE * SUBSPACE_DIM * PATCH_DIM);
        let dict = Self { scale, bases, params, step_count };
        let defect = dict.max_orthonormality_defect();
        assert!(defect < 1e-5, "loaded dictionary defect {defect}");
        dict
    }

    pub fn bases(&self) -> &[T] {
        &self.bases
    }

    pub fn params(&self) -> &GassomParams {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Current neighborhood width under the annealing schedule.
    pub fn sigma(&self) -> f64 {
        anneal(
            self.params.sigma_init,
            self.params.sigma_floor,
            self.step_count,
            self.params.anneal_steps,
        )
    }

    /// Current learning rate under the annealing schedule.
    pub fn eta(&self) -> f64 {
        anneal(
            self.params.eta_init,
            self.params.eta_floor,
            self.step_count,
            self.params.anneal_steps,
        )
    }

    /// The two orthonormal columns spanning subspace `k`.
    #[inline]
    pub fn basis(&self, k: usize) -> (&[T], &[T]) {
        let off = k * SUBSPACE_DIM * PATCH_DIM;
        (
            &self.bases[off..off + PATCH_DIM],
            &self.bases[off + PATCH_DIM..off + 2 * PATCH_DIM],
        )
    }

    /// Largest deviation of any basis from exact orthonormality, measured
    /// entrywise on B_k^T B_k - I.
    pub fn max_orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..DICT_SIZE {
            let (b1, b2) = self.basis(k);
            let (mut d11, mut d12, mut d22) = (0.0f64, 0.0, 0.0);
            for n in 0..PATCH_DIM {
                d11 += b1[n].f64() * b1[n].f64();
                d12 += b1[n].f64() * b2[n].f64();
                d22 += b2[n].f64() * b2[n].f64();
            }
            worst = worst
                .max((d11 - 1.0).abs())
                .max(d12.abs())
                .max((d22 - 1.0).abs());
        }
        worst
    }

    /// Gram-Schmidt on the two columns of basis `k`. Hard fault on
    /// degenerate or non-finite columns.
    fn orthonormalize(&mut self, k: usize) {
        let off = k * SUBSPACE_DIM * PATCH_DIM;
        let (b1, b2) = self.bases[off..off + 2 * PATCH_DIM].split_at_mut(PATCH_DIM);
        let mut n1 = T::default();
        for &v in b1.iter() {
            n1 += v * v;
        }
        let n1 = n1.sqrt();
        assert!(
            n1.f64().is_finite() && n1.f64() > 1e-12,
            "degenerate basis column during update"
        );
        let inv1 = T::one() / n1;
        for v in b1.iter_mut() {
            *v *= inv1;
        }
        let mut d = T::default();
        for n in 0..PATCH_DIM {
            d += b1[n] * b2[n];
        }
        for n in 0..PATCH_DIM {
            b2[n] -= d * b1[n];
        }
        let mut n2 = T::default();
        for &v in b2.iter() {
            n2 += v * v;
        }
        let n2 = n2.sqrt();
        assert!(
            n2.f64().is_finite() && n2.f64() > 1e-12,
            "degenerate basis column during update"
        );
        let inv2 = T::one() / n2;
        for v in b2.iter_mut() {
            *v *= inv2;
        }
    }

    /// Projects `x` onto every subspace, filling `proj` with the 2K
    /// projection coefficients and `energies` with the K squared lengths.
    fn project_all(&self, x: &[T], proj: &mut [T], energies: &mut [T]) {
        for k in 0..DICT_SIZE {
            let (b1, b2) = self.basis(k);
            let mut p1 = T::default();
            let mut p2 = T::default();
            for n in 0..PATCH_DIM {
                p1 += b1[n] * x[n];
                p2 += b2[n] * x[n];
            }
            proj[2 * k] = p1;
            proj[2 * k + 1] = p2;
            energies[k] = p1 * p1 + p2 * p2;
        }
    }

    /// Energy vector, winner and reconstruction error for one patch.
    /// Zero (invalid) patches yield zero energies, winner 0, error 0.
    pub fn encode(&self, x: &[T]) -> EncodingResult<T> {
        assert_eq!(x.len(), PATCH_DIM);
        let mut ss = T::default();
        for &v in x.iter() {
            ss += v * v;
        }
        if ss.f64() < 0.5 {
            return EncodingResult {
                energies: vec![T::default(); DICT_SIZE],
                winner: 0,
                error: T::default(),
                valid: false,
            };
        }
        let mut proj = vec![T::default(); 2 * DICT_SIZE];
        let mut energies = vec![T::default(); DICT_SIZE];
        self.project_all(x, &mut proj, &mut energies);
        let winner = argmax(&energies);
        let error = T::one() - energies[winner];
        EncodingResult { energies, winner, error, valid: true }
    }

    /// One online update call: every patch in the batch is absorbed
    /// sequentially, then the annealing step counter advances by one.
    pub fn update_batch(&mut self, patches: &[&[T]]) -> UpdateDiagnostics {
        let sigma = self.sigma();
        let eta = self.eta();
        let inv_tau = 1.0 / self.params.tau;

        // Separable peak-1 Gaussian neighborhood over the grid.
        let mut kernel = [0.0f64; SOM_SIDE];
        for (d, g) in kernel.iter_mut().enumerate() {
            *g = (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
        }

        let mut proj = vec![T::default(); 2 * DICT_SIZE];
        let mut energies = vec![T::default(); DICT_SIZE];
        let mut gamma = [0.0f64; DICT_SIZE];
        let mut tmp = [0.0f64; DICT_SIZE];
        let mut smooth = [0.0f64; DICT_SIZE];
        let mut err_sum = 0.0f64;
        let mut count = 0usize;

        for &x in patches {
            assert_eq!(x.len(), PATCH_DIM);
            self.project_all(x, &mut proj, &mut energies);
            let winner = argmax(&energies);
            err_sum += 1.0 - energies[winner].f64();
            count += 1;

            // Softmax responsibilities over energies, in f64 for stability.
            let mut cmax = f64::NEG_INFINITY;
            for &e in energies.iter() {
                cmax = cmax.max(e.f64());
            }
            let mut sum = 0.0f64;
            for (g, &e) in gamma.iter_mut().zip(energies.iter()) {
                *g = ((e.f64() - cmax) * inv_tau).exp();
                sum += *g;
            }
            let inv_sum = 1.0 / sum;
            for g in gamma.iter_mut() {
                *g *= inv_sum;
            }

            // Grid blur, rows then columns.
            for r in 0..SOM_SIDE {
                for c in 0..SOM_SIDE {
                    let mut acc = 0.0;
                    for c2 in 0..SOM_SIDE {
                        acc += gamma[r * SOM_SIDE + c2] * kernel[c.abs_diff(c2)];
                    }
                    tmp[r * SOM_SIDE + c] = acc;
                }
            }
            for c in 0..SOM_SIDE {
                for r in 0..SOM_SIDE {
                    let mut acc = 0.0;
                    for r2 in 0..SOM_SIDE {
                        acc += tmp[r2 * SOM_SIDE + c] * kernel[r.abs_diff(r2)];
                    }
                    smooth[r * SOM_SIDE + c] = acc;
                }
            }

            // Gradient step toward x for every subspace with non-negligible
            // responsibility, then restore orthonormality.
            for k in 0..DICT_SIZE {
                let s = eta * smooth[k];
                if s < 1e-12 {
                    continue;
                }
                let (p1, p2) = (proj[2 * k], proj[2 * k + 1]);
                let (sp1, sp2) = (T::c(s) * p1, T::c(s) * p2);
                let off = k * SUBSPACE_DIM * PATCH_DIM;
                let (b1, b2) = self.bases[off..off + 2 * PATCH_DIM].split_at_mut(PATCH_DIM);
                for n in 0..PATCH_DIM {
                    let r = x[n] - b1[n] * p1 - b2[n] * p2;
                    b1[n] += sp1 * r;
                    b2[n] += sp2 * r;
                }
                self.orthonormalize(k);
            }
        }

        self.step_count += 1;
        UpdateDiagnostics {
            mean_error: if count > 0 { err_sum / count as f64 } else { 0.0 },
            patches: count,
        }
    }

    /// Updates from the valid patches of one grid (one vergence step's
    /// batch for this scale).
    pub fn update_from_grid(&mut self, grid: &PatchGrid<T>) -> UpdateDiagnostics {
        debug_assert_eq!(grid.scale, self.scale);
        let patches: Vec<&[T]> = (0..crate::pyramid::PATCHES_PER_SCALE)
            .filter(|&i| grid.is_valid(i))
            .map(|i| grid.patch(i))
            .collect();
        self.update_batch(&patches)
    }
}

fn argmax<T: Float>(values: &[T]) -> usize {
    let mut best = 0usize;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

fn scale_slot(scale: Scale) -> usize {
    match scale {
        Scale::Fine => 0,
        Scale::Medium => 1,
        Scale::Coarse => 2,
    }
}

/// The three per-scale dictionaries learned jointly with behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet<T> {
    pub fine: SubspaceDictionary<T>,
    pub medium: SubspaceDictionary<T>,
    pub coarse: SubspaceDictionary<T>,
}

impl<T: Float> DictionarySet<T> {
    pub fn init(params: GassomParams, seed: u64) -> Self {
        Self {
            fine: SubspaceDictionary::init(Scale::Fine, params, seed),
            medium: SubspaceDictionary::init(Scale::Medium, params, seed),
            coarse: SubspaceDictionary::init(Scale::Coarse, params, seed),
        }
    }

    pub fn get(&self, scale: Scale) -> &SubspaceDictionary<T> {
        match scale {
            Scale::Fine => &self.fine,
            Scale::Medium => &self.medium,
            Scale::Coarse => &self.coarse,
        }
    }

    pub fn get_mut(&mut self, scale: Scale) -> &mut SubspaceDictionary<T> {
        match scale {
            Scale::Fine => &mut self.fine,
            Scale::Medium => &mut self.medium,
            Scale::Coarse => &mut self.coarse,
        }
    }

    /// One dictionary update call per scale from the current pyramid.
    pub fn update_from_pyramid(&mut self, pyramid: &PyramidInput<T>) {
        for scale in Scale::ALL {
            self.get_mut(scale).update_from_grid(pyramid.grid(scale));
        }
    }
}

/// Energies, winners, errors and validity for all 147 patches of a pyramid.
/// Scale blocks are stored fine, medium, coarse; accessors take `Scale` so
/// callers never index blocks directly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T> {
    energies: Vec<T>,
    errors: Vec<T>,
    winners: Vec<usize>,
    valid: Vec<bool>,
}

impl<T: Float> FeatureBundle<T> {
    const PER_SCALE: usize = crate::pyramid::PATCHES_PER_SCALE;

    /// Assembles a bundle from raw per-patch pieces, scale blocks ordered
    /// fine, medium, coarse. Used by diagnostics and tests that construct
    /// feature inputs directly.
    pub fn from_parts(
        energies: Vec<T>,
        errors: Vec<T>,
        winners: Vec<usize>,
        valid: Vec<bool>,
    ) -> Self {
        assert_eq!(energies.len(), 3 * Self::PER_SCALE * DICT_SIZE);
        assert_eq!(errors.len(), 3 * Self::PER_SCALE);
        assert_eq!(winners.len(), 3 * Self::PER_SCALE);
        assert_eq!(valid.len(), 3 * Self::PER_SCALE);
        Self { energies, errors, winners, valid }
    }

    #[inline]
    fn flat(scale: Scale, idx: usize) -> usize {
        debug_assert!(idx < Self::PER_SCALE);
        scale_slot(scale) * Self::PER_SCALE + idx
    }

    pub fn energy(&self, scale: Scale, idx: usize) -> &[T] {
        let f = Self::flat(scale, idx);
        &self.energies[f * DICT_SIZE..(f + 1) * DICT_SIZE]
    }

    pub fn error(&self, scale: Scale, idx: usize) -> T {
        self.errors[Self::flat(scale, idx)]
    }

    pub fn winner(&self, scale: Scale, idx: usize) -> usize {
        self.winners[Self::flat(scale, idx)]
    }

    pub fn is_valid(&self, scale: Scale, idx: usize) -> bool {
        self.valid[Self::flat(scale, idx)]
    }

    pub fn valid_count(&self, scale: Scale) -> usize {
        let s = scale_slot(scale) * Self::PER_SCALE;
        self.valid[s..s + Self::PER_SCALE].iter().filter(|&&v| v).count()
    }
}

/// Encodes every patch of the pyramid with its scale's dictionary.
pub fn encode_pyramid<T: Float>(
    dicts: &DictionarySet<T>,
    pyramid: &PyramidInput<T>,
) -> FeatureBundle<T> {
    let per = crate::pyramid::PATCHES_PER_SCALE;
    let mut energies = vec![T::default(); 3 * per * DICT_SIZE];
    let mut errors = vec![T::default(); 3 * per];
    let mut winners = vec![0usize; 3 * per];
    let mut valid = vec![false; 3 * per];
    for scale in Scale::ALL {
        let dict = dicts.get(scale);
        let grid = pyramid.grid(scale);
        for idx in 0..per {
            let f = scale_slot(scale) * per + idx;
            let enc = dict.encode(grid.patch(idx));
            energies[f * DICT_SIZE..(f + 1) * DICT_SIZE].copy_from_slice(&enc.energies);
            errors[f] = enc.error;
            winners[f] = enc.winner;
            valid[f] = enc.valid;
        }
    }
    FeatureBundle { energies, errors, winners, valid }
}

/// Mean winner energy and mean reconstruction error of a probe sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningPoint {
    pub mean_winner_energy: f64,
    pub mean_error: f64,
}

/// Builds one synthetic binocular probe patch: the left half is a vertical
/// sinusoidal grating of `m` cycles per patch, the right half is the left
/// circularly shifted `d` columns in the scene disparity convention
/// (`right(c) = left(c + d)`).
fn probe_patch<T: Float>(m: u32, phase: f64, d: i32) -> [T; PATCH_DIM] {
    let mut patch = [T::default(); PATCH_DIM];
    let half = PATCH_DIM / 2;
    for c in 0..PATCH_SIZE {
        let left = ((std::f64::consts::TAU * m as f64 * c as f64) / PATCH_SIZE as f64 - phase).cos();
        let shifted = (c as i32 + d).rem_euclid(PATCH_SIZE as i32) as usize;
        let right =
            ((std::f64::consts::TAU * m as f64 * shifted as f64) / PATCH_SIZE as f64 - phase).cos();
        for r in 0..PATCH_SIZE {
            patch[r * PATCH_SIZE + c] = T::c(left);
            patch[half + r * PATCH_SIZE + c] = T::c(right);
        }
    }
    let ok = normalize_patch(&mut patch);
    debug_assert!(ok);
    patch
}

/// Mean encoding statistics over `n_probes` grating probes at input
/// disparity `d`, cycling spatial frequencies 1..=4 with random phases.
pub fn probe_disparity_tuning<T: Float>(
    dict: &SubspaceDictionary<T>,
    d: i32,
    n_probes: usize,
    seed: u64,
) -> Result<TuningPoint, GassomError> {
    if d.unsigned_abs() > 9 {
        return Err(GassomError::ProbeShiftTooLarge(d));
    }
    let mut rng = seeds::stream(seed, "tuning-probe", &[d as i64 as u64]);
    let mut energy_sum = 0.0f64;
    let mut error_sum = 0.0f64;
    for i in 0..n_probes {
        let m = 1 + (i % 4) as u32;
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let patch = probe_patch::<T>(m, phase, d);
        let enc = dict.encode(&patch);
        energy_sum += enc.energies[enc.winner].f64();
        error_sum += enc.error.f64();
    }
    Ok(TuningPoint {
        mean_winner_energy: energy_sum / n_probes as f64,
        mean_error: error_sum / n_probes as f64,
    })
}

/// Analytic quadrature-pair dictionary tuned to one preferred probe shift.
/// Every subspace spans the pair of phase-quadrature gratings whose right
/// half is the left half shifted by `preferred_shift`, cycling frequencies
/// 1..=4 across slots; probes at that shift reconstruct exactly.
pub fn quadrature_grating_dictionary<T: Float>(
    scale: Scale,
    params: GassomParams,
    preferred_shift: i32,
) -> SubspaceDictionary<T> {
    assert!(preferred_shift.unsigned_abs() <= 4);
    let half = PATCH_DIM / 2;
    let mut bases = vec![T::default(); DICT_SIZE * SUBSPACE_DIM * PATCH_DIM];
    for k in 0..DICT_SIZE {
        let m = 1 + (k % 4) as u32;
        // Independent per-slot base phase; subspaces with equal m are the
        // same subspace expressed in rotated coordinates, which is fine:
        // encoding depends only on the span.
        let phase = std::f64::consts::TAU * (k / 4) as f64 / 81.0;
        let off = k * SUBSPACE_DIM * PATCH_DIM;
        for c in 0..PATCH_SIZE {
            let theta = std::f64::consts::TAU * m as f64 * c as f64 / PATCH_SIZE as f64 - phase;
            let shifted = (c as i32 + preferred_shift).rem_euclid(PATCH_SIZE as i32) as usize;
            let theta_s =
                std::f64::consts::TAU * m as f64 * shifted as f64 / PATCH_SIZE as f64 - phase;
            // Rows share column values; norm over 100 entries is then
            // 10 * (sum over columns), and each half carries half the
            // total weight.
            let amp = (2.0 / PATCH_DIM as f64).sqrt();
            for r in 0..PATCH_SIZE {
                bases[off + r * PATCH_SIZE + c] = T::c(amp * theta.cos());
                bases[off + half + r * PATCH_SIZE + c] = T::c(amp * theta_s.cos());
                bases[off + PATCH_DIM + r * PATCH_SIZE + c] = T::c(amp * theta.sin());
                bases[off + PATCH_DIM + half + r * PATCH_SIZE + c] = T::c(amp * theta_s.sin());
            }
        }
    }
    let mut dict = SubspaceDictionary { scale, bases, params, step_count: 0 };
    for k in 0..DICT_SIZE {
        dict.orthonormalize(k);
    }
    dict
}
