//! Stereo scene synthesis, scene file I/O and gaze/vergence kinematics.
//!
//! Scenes pair a left and a right grayscale image with a ground-truth
//! horizontal disparity map aligned to the left image. Positive disparity
//! means the right-image feature sits shifted toward lower column indices:
//! `right(r, c - d) = left(r, c)`. The agent acts by shifting the centers of
//! its right-eye subwindows `vergence` pixels against that displacement, so
//! the residual disparity it actually sees at the fixation point is
//! `disparity_map(fixation) - vergence`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::raster::{Raster, RasterError};
use crate::{pyramid, seeds, Float, VERGENCE_ACTIONS};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("action {0} is not in the vergence action set")]
    UnknownAction(i32),
    #[error("pinned fixation requested but the scene has no anchor")]
    NoAnchor,
}

fn scene_err(msg: impl Into<String>) -> EnvError {
    EnvError::Scene(msg.into())
}

/// Environment-level limits shared by synthesis, loading and kinematics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvParams {
    /// Largest allowed |disparity| in pixels.
    pub d_max: f64,
    /// Vergence clamp bound in pixels.
    pub v_max: i32,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self { d_max: 24.0, v_max: 32 }
    }
}

impl EnvParams {
    /// Margin that keeps every subwindow of both eyes inside the image for
    /// any vergence within the clamp bounds.
    pub fn fixation_margin(&self) -> usize {
        pyramid::COARSE_WINDOW / 2 + self.v_max.unsigned_abs() as usize
    }

    /// Smallest supported image side length.
    pub fn min_scene_side(&self) -> usize {
        2 * pyramid::COARSE_WINDOW + 2 * self.v_max.unsigned_abs() as usize
    }

    /// Inclusive range of valid fixation coordinates along an axis of the
    /// given extent.
    pub fn valid_range(&self, extent: usize) -> std::ops::RangeInclusive<usize> {
        let m = self.fixation_margin();
        m..=extent - 1 - m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoScene<T> {
    pub left: Raster<T>,
    pub right: Raster<T>,
    /// Horizontal disparity in pixels, aligned to the left image.
    pub disparity: Raster<f64>,
    pub id: String,
    /// Center of the foreground square for conflict scenes; the pinned
    /// fixation mode targets it.
    pub anchor: Option<(usize, usize)>,
}

impl<T: Float> StereoScene<T> {
    /// Checks the structural invariants every scene must satisfy.
    pub fn validate(&self, params: &EnvParams) -> Result<(), EnvError> {
        let (r, c) = (self.left.rows(), self.left.cols());
        if (self.right.rows(), self.right.cols()) != (r, c)
            || (self.disparity.rows(), self.disparity.cols()) != (r, c)
        {
            return Err(scene_err(format!(
                "dimension mismatch: left {r}x{c}, right {}x{}, disparity {}x{}",
                self.right.rows(),
                self.right.cols(),
                self.disparity.rows(),
                self.disparity.cols()
            )));
        }
        let min = params.min_scene_side();
        if r < min || c < min {
            return Err(scene_err(format!(
                "scene {r}x{c} smaller than supported minimum {min}x{min}"
            )));
        }
        for &d in self.disparity.as_slice() {
            if !d.is_finite() {
                return Err(scene_err("non-finite disparity value"));
            }
            if d.abs() > params.d_max {
                return Err(scene_err(format!(
                    "disparity {d} exceeds bound {}",
                    params.d_max
                )));
            }
        }
        Ok(())
    }
}

/// Fixation center in the left image plus the current vergence shift of the
/// right-eye subwindow centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GazeState {
    pub fixation: (usize, usize),
    pub vergence: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    UniformPlane,
    Conflict,
}

/// Texture synthesis knobs. The texture is a sum of low-pass filtered white
/// noise and a few random sinusoidal gratings, scaled so the sum always fits
/// in [0, 1] without clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureParams {
    pub noise_amplitude: f64,
    pub min_gratings: u32,
    pub max_gratings: u32,
    /// Grating wavelength bounds in pixels; sampled log-uniformly.
    pub min_wavelength: f64,
    pub max_wavelength: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            noise_amplitude: 0.6,
            min_gratings: 2,
            max_gratings: 4,
            min_wavelength: 8.0,
            max_wavelength: 64.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub rows: usize,
    pub cols: usize,
    pub texture: TextureParams,
    pub background_disparity: f64,
    /// Conflict scenes only.
    pub foreground_disparity: f64,
    /// Half-width in pixels of the foreground square, conflict scenes only.
    pub foreground_extent: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::UniformPlane,
            rows: 512,
            cols: 512,
            texture: TextureParams::default(),
            background_disparity: 0.0,
            foreground_disparity: 0.0,
            foreground_extent: 30,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self, params: &EnvParams) -> Result<(), EnvError> {
        let err = |m: String| Err(EnvError::Spec(m));
        let min = params.min_scene_side();
        if self.rows < min || self.cols < min {
            return err(format!("scene size {}x{} below minimum {min}", self.rows, self.cols));
        }
        // Integer disparities keep the rendering constraint exact; the
        // generator shifts whole texture columns.
        for (name, d) in [
            ("background", self.background_disparity),
            ("foreground", self.foreground_disparity),
        ] {
            if !d.is_finite() || d.abs() > params.d_max {
                return err(format!("{name} disparity {d} outside ±{}", params.d_max));
            }
            if d.fract() != 0.0 {
                return err(format!("{name} disparity {d} is not an integer"));
            }
            if self.kind == SceneKind::UniformPlane {
                break;
            }
        }
        if self.kind == SceneKind::Conflict && !(20..=80).contains(&self.foreground_extent) {
            return err(format!(
                "foreground extent {} outside [20, 80]",
                self.foreground_extent
            ));
        }
        let t = &self.texture;
        if t.min_gratings < 1 || t.max_gratings < t.min_gratings {
            return err("grating count range empty".into());
        }
        if !(t.min_wavelength >= 2.0 && t.max_wavelength >= t.min_wavelength) {
            return err("bad wavelength range".into());
        }
        if !(t.noise_amplitude > 0.0) {
            return err("noise amplitude must be positive".into());
        }
        Ok(())
    }
}

/// Low-pass filters `src` in place with two passes of a separable 3x3 box
/// kernel, clamping at the borders.
fn box_blur3(src: &mut Raster<f64>) {
    let (rows, cols) = (src.rows(), src.cols());
    let mut tmp = vec![0.0f64; rows * cols];
    for _ in 0..2 {
        // Horizontal pass into tmp.
        for r in 0..rows {
            let row = src.row(r);
            for c in 0..cols {
                let l = row[c.saturating_sub(1)];
                let m = row[c];
                let h = row[(c + 1).min(cols - 1)];
                tmp[r * cols + c] = (l + m + h) / 3.0;
            }
        }
        // Vertical pass back into src.
        for r in 0..rows {
            let up = r.saturating_sub(1);
            let dn = (r + 1).min(rows - 1);
            for c in 0..cols {
                let v = (tmp[up * cols + c] + tmp[r * cols + c] + tmp[dn * cols + c]) / 3.0;
                src.set(r, c, v);
            }
        }
    }
}

/// Bandlimited noise plus 2-4 sinusoidal gratings, amplitude-normalized into
/// [0, 1] and snapped to the 16-bit grid so file round trips are exact.
fn generate_texture(rows: usize, cols: usize, p: &TextureParams, rng: &mut ChaCha8Rng) -> Raster<f64> {
    let n_gratings = rng.gen_range(p.min_gratings..=p.max_gratings);
    struct Grating {
        freq_r: f64,
        freq_c: f64,
        phase: f64,
        amp: f64,
    }
    let gratings: Vec<Grating> = (0..n_gratings)
        .map(|_| {
            let theta = rng.gen::<f64>() * std::f64::consts::PI;
            let log_span = (p.max_wavelength / p.min_wavelength).ln();
            let wavelength = p.min_wavelength * (rng.gen::<f64>() * log_span).exp();
            Grating {
                freq_r: theta.sin() / wavelength,
                freq_c: theta.cos() / wavelength,
                phase: rng.gen::<f64>() * std::f64::consts::TAU,
                amp: 0.5 + 0.5 * rng.gen::<f64>(),
            }
        })
        .collect();

    let mut noise = Raster::new(rows, cols, 0.0f64);
    for v in noise.as_mut_slice() {
        *v = rng.gen::<f64>() * 2.0 - 1.0;
    }
    box_blur3(&mut noise);

    // Every component is bounded by its amplitude, so dividing by the total
    // keeps the sum in [-1, 1] and the final image in [0, 1] with no
    // clipping.
    let total_amp = p.noise_amplitude + gratings.iter().map(|g| g.amp).sum::<f64>();
    let mut tex = Raster::new(rows, cols, 0.0f64);
    for r in 0..rows {
        for c in 0..cols {
            let mut v = p.noise_amplitude * noise.get(r, c);
            for g in &gratings {
                v += g.amp
                    * (std::f64::consts::TAU * (g.freq_r * r as f64 + g.freq_c * c as f64)
                        + g.phase)
                        .cos();
            }
            tex.set(r, c, 0.5 + 0.5 * v / total_amp);
        }
    }
    tex.quantize_u16();
    tex
}

/// Smallest sample variance over all `size`x`size` windows, computed with
/// summed-area tables. Texture generation must keep this positive so patch
/// normalization never degenerates.
pub fn min_window_variance<T: Float>(img: &Raster<T>, size: usize) -> f64 {
    let (rows, cols) = (img.rows(), img.cols());
    assert!(size >= 1 && rows >= size && cols >= size);
    let w = cols + 1;
    let mut sum = vec![0.0f64; (rows + 1) * w];
    let mut sq = vec![0.0f64; (rows + 1) * w];
    for r in 0..rows {
        for c in 0..cols {
            let v = img.get(r, c).f64();
            sum[(r + 1) * w + c + 1] = v + sum[r * w + c + 1] + sum[(r + 1) * w + c] - sum[r * w + c];
            sq[(r + 1) * w + c + 1] =
                v * v + sq[r * w + c + 1] + sq[(r + 1) * w + c] - sq[r * w + c];
        }
    }
    let n = (size * size) as f64;
    let mut min_var = f64::INFINITY;
    for r in 0..=rows - size {
        for c in 0..=cols - size {
            let s = sum[(r + size) * w + c + size] - sum[r * w + c + size]
                - sum[(r + size) * w + c]
                + sum[r * w + c];
            let s2 = sq[(r + size) * w + c + size] - sq[r * w + c + size] - sq[(r + size) * w + c]
                + sq[r * w + c];
            min_var = min_var.min((s2 - s * s / n) / n);
        }
    }
    min_var
}

/// Column span the two eyes can address: left samples at texture column
/// `c + margin`, right at `c + shift + margin` for |shift| ≤ d_max.
fn disparity_margin(params: &EnvParams) -> usize {
    params.d_max.ceil() as usize
}

/// Synthesizes a scene. Deterministic given (spec, seed): the left image,
/// right image and disparity map are pure functions of the two.
pub fn generate_scene<T: Float>(
    spec: &SceneSpec,
    params: &EnvParams,
    seed: u64,
) -> Result<StereoScene<T>, EnvError> {
    spec.validate(params)?;
    let (rows, cols) = (spec.rows, spec.cols);
    let margin = disparity_margin(params);
    let ext_cols = cols + 2 * margin;
    let db = spec.background_disparity as i64;

    let mut bg_rng = seeds::stream(seed, "texture", &[0]);
    let bg = generate_texture(rows, ext_cols, &spec.texture, &mut bg_rng);
    // Texture column for image column `c` seen with horizontal shift `s`.
    let at = |tex: &Raster<f64>, r: usize, c: usize, s: i64| -> f64 {
        tex.get(r, (c as i64 + s + margin as i64) as usize)
    };

    let mut left = Raster::new(rows, cols, 0.0f64);
    let mut right = Raster::new(rows, cols, 0.0f64);
    let mut disparity = Raster::new(rows, cols, spec.background_disparity);
    let mut anchor = None;

    match spec.kind {
        SceneKind::UniformPlane => {
            for r in 0..rows {
                for c in 0..cols {
                    left.set(r, c, at(&bg, r, c, 0));
                    right.set(r, c, at(&bg, r, c, db));
                }
            }
        }
        SceneKind::Conflict => {
            let mut fg_rng = seeds::stream(seed, "texture", &[1]);
            let fg = generate_texture(rows, ext_cols, &spec.texture, &mut fg_rng);
            let df = spec.foreground_disparity as i64;
            let (ar, ac) = (rows / 2, cols / 2);
            anchor = Some((ar, ac));
            let e = spec.foreground_extent as i64;
            let in_fg = |r: i64, c: i64| -> bool {
                r >= ar as i64 - e
                    && r < ar as i64 + e
                    && c >= ac as i64 - e
                    && c < ac as i64 + e
            };
            for r in 0..rows {
                for c in 0..cols {
                    if in_fg(r as i64, c as i64) {
                        left.set(r, c, at(&fg, r, c, 0));
                        disparity.set(r, c, spec.foreground_disparity);
                    } else {
                        left.set(r, c, at(&bg, r, c, 0));
                    }
                    // The foreground occludes the background in the right
                    // eye as well; background fills everything else.
                    if in_fg(r as i64, c as i64 + df) {
                        right.set(r, c, at(&fg, r, c, df));
                    } else {
                        right.set(r, c, at(&bg, r, c, db));
                    }
                }
            }
        }
    }

    let kind = match spec.kind {
        SceneKind::UniformPlane => "plane",
        SceneKind::Conflict => "conflict",
    };
    let scene = StereoScene {
        left: convert(&left),
        right: convert(&right),
        disparity,
        id: format!("{kind}-{seed:016x}"),
        anchor,
    };
    scene.validate(params)?;
    debug_assert!(min_window_variance(&scene.left, 10) > 0.0);
    Ok(scene)
}

fn convert<T: Float>(src: &Raster<f64>) -> Raster<T> {
    let data = src.as_slice().iter().map(|&v| T::c(v)).collect();
    Raster::from_vec(src.rows(), src.cols(), data)
}

/// Writes a scene as two 16-bit graymaps plus a comma-separated disparity
/// table. Generated scenes round-trip bit-identically because their values
/// live on the 16-bit grid.
pub fn save_scene<T: Float>(
    scene: &StereoScene<T>,
    left_path: &Path,
    right_path: &Path,
    disparity_path: &Path,
) -> Result<(), EnvError> {
    scene.left.write_pgm16(left_path)?;
    scene.right.write_pgm16(right_path)?;
    scene.disparity.write_csv(disparity_path)?;
    Ok(())
}

/// Reads a disparity map stored either as a comma-separated table or as a
/// 16-bit graymap with the fixed encoding `stored = round(d * 256) + 32768`.
fn read_disparity(path: &Path) -> Result<Raster<f64>, EnvError> {
    let mut magic = [0u8; 2];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path).map_err(RasterError::Io)?;
        let n = f.read(&mut magic).map_err(RasterError::Io)?;
        if n < 2 {
            return Err(scene_err("disparity file too short"));
        }
    }
    if &magic == b"P5" || &magic == b"P2" {
        let raw = Raster::<f64>::read_pgm(path)?;
        let data = raw
            .as_slice()
            .iter()
            .map(|&v| ((v * 65535.0).round() - 32768.0) / 256.0)
            .collect();
        Ok(Raster::from_vec(raw.rows(), raw.cols(), data))
    } else {
        Ok(Raster::read_csv(path)?)
    }
}

/// Loads a scene from image and disparity files and checks all scene
/// invariants. The scene id is the left image's file stem.
pub fn load_scene<T: Float>(
    left_path: &Path,
    right_path: &Path,
    disparity_path: &Path,
    params: &EnvParams,
) -> Result<StereoScene<T>, EnvError> {
    let left = Raster::<T>::read_pgm(left_path)?;
    let right = Raster::<T>::read_pgm(right_path)?;
    let disparity = read_disparity(disparity_path)?;
    let id = left_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let scene = StereoScene { left, right, disparity, id, anchor: None };
    scene.validate(params)?;
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixationMode {
    /// Uniform over the valid region.
    Uniform,
    /// Fixation pinned to the scene's foreground anchor.
    Pinned,
}

/// Draws a fixation and an initial vergence. Uniform mode consumes three
/// draws (row, col, error); pinned mode consumes only the error draw. The
/// initial vergence error (the residual disparity before any action) is
/// uniform over the integers in [-max_error, max_error]; the vergence is
/// composed from the ground truth at the fixation so the error distribution
/// holds regardless of scene disparity.
pub fn sample_fixation<T: Float>(
    scene: &StereoScene<T>,
    params: &EnvParams,
    mode: FixationMode,
    max_error: i32,
    rng: &mut ChaCha8Rng,
) -> Result<GazeState, EnvError> {
    assert!(max_error >= 0);
    let fixation = match mode {
        FixationMode::Uniform => {
            let r = rng.gen_range(params.valid_range(scene.left.rows()));
            let c = rng.gen_range(params.valid_range(scene.left.cols()));
            (r, c)
        }
        FixationMode::Pinned => scene.anchor.ok_or(EnvError::NoAnchor)?,
    };
    let error = rng.gen_range(-max_error..=max_error);
    let gt = scene.disparity.get(fixation.0, fixation.1).round() as i32;
    let vergence = (gt - error).clamp(-params.v_max, params.v_max);
    Ok(GazeState { fixation, vergence })
}

/// Adds a vergence action to the gaze, clamping to the vergence bounds.
/// Fixation never moves.
pub fn apply_action(gaze: GazeState, delta: i32, params: &EnvParams) -> Result<GazeState, EnvError> {
    if !VERGENCE_ACTIONS.contains(&delta) {
        return Err(EnvError::UnknownAction(delta));
    }
    Ok(GazeState {
        fixation: gaze.fixation,
        vergence: (gaze.vergence + delta).clamp(-params.v_max, params.v_max),
    })
}

/// Vergence that would null the disparity at the fixation pixel.
pub fn ground_truth_vergence<T: Float>(scene: &StereoScene<T>, gaze: &GazeState) -> f64 {
    scene.disparity.get(gaze.fixation.0, gaze.fixation.1)
}

/// Disparity still seen at the fixation pixel under the current vergence.
pub fn residual_disparity<T: Float>(scene: &StereoScene<T>, gaze: &GazeState) -> f64 {
    ground_truth_vergence(scene, gaze) - gaze.vergence as f64
}
