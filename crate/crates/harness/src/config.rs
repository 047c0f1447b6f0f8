//! Run configuration: a TOML file with one section per subsystem. Every
//! field has the engine's default, so an empty file is a valid config and
//! partial files override selectively.

use std::path::Path;

use serde::{Deserialize, Serialize};
use verge_core::env::{EnvParams, SceneKind, SceneSpec, TextureParams};
use verge_core::gassom::GassomParams;
use verge_core::learner::{NacParams, NormalizerParams};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Parallel,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub model: ModelKind,
    /// Scene count; total training steps = scenes * fixations * steps.
    pub scenes: u64,
    pub fixations_per_scene: u64,
    pub steps_per_fixation: u64,
    /// Steps between metrics rows.
    pub metrics_interval: u64,
    /// Steps between checkpoint saves, aligned to fixation boundaries;
    /// 0 saves only the final checkpoint.
    pub checkpoint_interval: u64,
    pub temperature: f32,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            model: ModelKind::Parallel,
            scenes: 1000,
            fixations_per_scene: 20,
            steps_per_fixation: 10,
            metrics_interval: 1000,
            checkpoint_interval: 0,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub rows: usize,
    pub cols: usize,
    pub d_max: f64,
    pub v_max: i32,
    pub noise_amplitude: f64,
    pub min_gratings: u32,
    pub max_gratings: u32,
    pub min_wavelength: f64,
    pub max_wavelength: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EnvParams::default();
        let t = TextureParams::default();
        Self {
            rows: 512,
            cols: 512,
            d_max: e.d_max,
            v_max: e.v_max,
            noise_amplitude: t.noise_amplitude,
            min_gratings: t.min_gratings,
            max_gratings: t.max_gratings,
            min_wavelength: t.min_wavelength,
            max_wavelength: t.max_wavelength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    /// Fraction of training scenes carrying a depth-conflict square.
    pub conflict_fraction: f64,
    pub plane_disparity_min: i32,
    pub plane_disparity_max: i32,
    /// |foreground - background| disparity range on conflict scenes.
    pub conflict_offset_min: i32,
    pub conflict_offset_max: i32,
    pub conflict_extent: usize,
    /// Initial vergence error bound per training fixation.
    pub initial_error: i32,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self {
            conflict_fraction: 0.3,
            plane_disparity_min: -10,
            plane_disparity_max: 10,
            conflict_offset_min: 8,
            conflict_offset_max: 10,
            conflict_extent: 30,
            initial_error: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GassomSection {
    pub tau: f64,
    pub sigma_init: f64,
    pub sigma_floor: f64,
    pub eta_init: f64,
    pub eta_floor: f64,
    pub anneal_steps: u64,
}

impl Default for GassomSection {
    fn default() -> Self {
        let g = GassomParams::default();
        Self {
            tau: g.tau,
            sigma_init: g.sigma_init,
            sigma_floor: g.sigma_floor,
            eta_init: g.eta_init,
            eta_floor: g.eta_floor,
            anneal_steps: g.anneal_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NacSection {
    pub gamma: f64,
    pub lambda: f64,
    pub alpha_critic: f64,
    pub alpha_advantage: f64,
    pub alpha_actor: f64,
}

impl Default for NacSection {
    fn default() -> Self {
        let n = NacParams::default();
        Self {
            gamma: n.gamma,
            lambda: n.lambda,
            alpha_critic: n.alpha_critic,
            alpha_advantage: n.alpha_advantage,
            alpha_actor: n.alpha_actor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizerSection {
    pub rate: f64,
    pub floor: f64,
    pub clip: f64,
}

impl Default for NormalizerSection {
    fn default() -> Self {
        let n = NormalizerParams::default();
        Self { rate: n.rate, floor: n.floor, clip: n.clip }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub fixations: usize,
    /// Initial vergence error bound per evaluation fixation.
    pub initial_error: i32,
    /// "plane" or "conflict"; conflict fixations pin to the square.
    pub kind: EvalKind,
    pub record_rewards: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Plane,
    Conflict,
}

impl EvalKind {
    pub fn scene_kind(self) -> SceneKind {
        match self {
            EvalKind::Plane => SceneKind::UniformPlane,
            EvalKind::Conflict => SceneKind::Conflict,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { fixations: 200, initial_error: 10, kind: EvalKind::Plane, record_rewards: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub d_min: i32,
    pub d_max: i32,
    pub probes_per_d: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { d_min: -20, d_max: 20, probes_per_d: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub env: EnvSection,
    pub curriculum: CurriculumSection,
    pub gassom: GassomSection,
    pub nac: NacSection,
    pub normalizer: NormalizerSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Config =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::Io)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        let r = &self.run;
        if r.scenes == 0 || r.fixations_per_scene == 0 || r.steps_per_fixation == 0 {
            return fail("protocol counts must be positive".into());
        }
        if !(r.temperature > 0.0) {
            return fail("temperature must be positive".into());
        }
        let c = &self.curriculum;
        if !(0.0..=1.0).contains(&c.conflict_fraction) {
            return fail("conflict_fraction must lie in [0, 1]".into());
        }
        if c.plane_disparity_min > c.plane_disparity_max {
            return fail("plane disparity range is empty".into());
        }
        if c.conflict_offset_min > c.conflict_offset_max || c.conflict_offset_min < 1 {
            return fail("conflict offset range must be positive and ordered".into());
        }
        let worst = c
            .plane_disparity_min
            .abs()
            .max(c.plane_disparity_max.abs())
            + c.conflict_offset_max;
        if f64::from(worst) > self.env.d_max {
            return fail(format!(
                "curriculum can produce |disparity| {} beyond d_max {}",
                worst, self.env.d_max
            ));
        }
        if c.initial_error < 0 || self.eval.initial_error < 0 {
            return fail("initial error bounds must be non-negative".into());
        }
        if c.initial_error > self.env.v_max || self.eval.initial_error > self.env.v_max {
            return fail("initial error bound exceeds v_max".into());
        }
        let n = &self.normalizer;
        if !(n.rate > 0.0 && n.rate < 1.0) || !(n.floor > 0.0) || !(n.clip > 0.0) {
            return fail("normalizer rate must lie in (0, 1); floor and clip must be positive".into());
        }
        if self.probe.d_min > self.probe.d_max {
            return fail("probe disparity range is empty".into());
        }
        if self.probe.d_min.abs().max(self.probe.d_max.abs()) > self.env.v_max {
            return fail("probe disparities exceed the vergence mechanism's range".into());
        }
        if self.probe.probes_per_d == 0 || self.eval.fixations == 0 {
            return fail("probe and eval counts must be positive".into());
        }
        // Scene geometry: env validation needs the spec, so build one.
        self.plane_spec(0.0).validate(&self.env_params()).map_err(HarnessError::Env)?;
        Ok(())
    }

    pub fn env_params(&self) -> EnvParams {
        EnvParams { d_max: self.env.d_max, v_max: self.env.v_max }
    }

    pub fn texture_params(&self) -> TextureParams {
        TextureParams {
            noise_amplitude: self.env.noise_amplitude,
            min_gratings: self.env.min_gratings,
            max_gratings: self.env.max_gratings,
            min_wavelength: self.env.min_wavelength,
            max_wavelength: self.env.max_wavelength,
        }
    }

    pub fn gassom_params(&self) -> GassomParams {
        GassomParams {
            tau: self.gassom.tau,
            sigma_init: self.gassom.sigma_init,
            sigma_floor: self.gassom.sigma_floor,
            eta_init: self.gassom.eta_init,
            eta_floor: self.gassom.eta_floor,
            anneal_steps: self.gassom.anneal_steps,
        }
    }

    pub fn nac_params(&self) -> NacParams {
        NacParams {
            gamma: self.nac.gamma,
            lambda: self.nac.lambda,
            alpha_critic: self.nac.alpha_critic,
            alpha_advantage: self.nac.alpha_advantage,
            alpha_actor: self.nac.alpha_actor,
        }
    }

    pub fn normalizer_params(&self) -> NormalizerParams {
        NormalizerParams {
            rate: self.normalizer.rate,
            floor: self.normalizer.floor,
            clip: self.normalizer.clip,
        }
    }

    pub fn plane_spec(&self, disparity: f64) -> SceneSpec {
        SceneSpec {
            kind: SceneKind::UniformPlane,
            rows: self.env.rows,
            cols: self.env.cols,
            texture: self.texture_params(),
            background_disparity: disparity,
            ..SceneSpec::default()
        }
    }

    pub fn conflict_spec(&self, background: f64, foreground: f64) -> SceneSpec {
        SceneSpec {
            kind: SceneKind::Conflict,
            rows: self.env.rows,
            cols: self.env.cols,
            texture: self.texture_params(),
            background_disparity: background,
            foreground_disparity: foreground,
            foreground_extent: self.curriculum.conflict_extent,
        }
    }

    pub fn steps_per_scene(&self) -> u64 {
        self.run.fixations_per_scene * self.run.steps_per_fixation
    }

    pub fn total_steps(&self) -> u64 {
        self.run.scenes * self.steps_per_scene()
    }
}
