//! Three-scale binocular patch pyramid around the current gaze.
//!
//! Each scale cuts a square subwindow per eye (160, 80 and 40 pixels wide),
//! block-averages it down to 40x40, and slices it into a 7x7 grid of 10x10
//! patches at stride 5. A stereo patch stacks the left and right 100-pixel
//! patches, removes each eye's mean, and scales the concatenated vector to
//! unit length, which makes subspace energies directly comparable across
//! patches and bounds reconstruction error to [0, 1].

use crate::env::{GazeState, StereoScene};
use crate::raster::Raster;
use crate::Float;

pub const FINE_WINDOW: usize = 40;
pub const MEDIUM_WINDOW: usize = 80;
pub const COARSE_WINDOW: usize = 160;
/// Patch side in pixels, per eye.
pub const PATCH_SIZE: usize = 10;
pub const PATCH_STRIDE: usize = 5;
/// Patches per subwindow row/column.
pub const GRID_SIDE: usize = 7;
pub const PATCHES_PER_SCALE: usize = GRID_SIDE * GRID_SIDE;
/// Stereo patch vector length: 100 left pixels then 100 right pixels.
pub const PATCH_DIM: usize = 2 * PATCH_SIZE * PATCH_SIZE;
/// Patches whose raw (mean-removed) variance falls below this are invalid.
pub const MIN_PATCH_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Fine,
    Medium,
    Coarse,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Fine, Scale::Medium, Scale::Coarse];

    /// Source subwindow side length before downsampling.
    pub fn window(self) -> usize {
        match self {
            Scale::Fine => FINE_WINDOW,
            Scale::Medium => MEDIUM_WINDOW,
            Scale::Coarse => COARSE_WINDOW,
        }
    }

    /// Block-averaging factor that brings the subwindow to 40x40.
    pub fn downsample(self) -> usize {
        self.window() / FINE_WINDOW
    }
}

/// Grid index of the patch at offsets (i, j), i, j in -3..=3, row-major.
#[inline]
pub fn patch_index(i: i32, j: i32) -> usize {
    debug_assert!((-3..=3).contains(&i) && (-3..=3).contains(&j));
    ((i + 3) * GRID_SIDE as i32 + (j + 3)) as usize
}

/// 7x7 grid of normalized stereo patch vectors for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    pub scale: Scale,
    data: Vec<T>,
    valid: [bool; PATCHES_PER_SCALE],
}

impl<T: Float> PatchGrid<T> {
    #[inline]
    pub fn patch(&self, idx: usize) -> &[T] {
        &self.data[idx * PATCH_DIM..(idx + 1) * PATCH_DIM]
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidInput<T> {
    pub fine: PatchGrid<T>,
    pub medium: PatchGrid<T>,
    pub coarse: PatchGrid<T>,
}

impl<T: Float> PyramidInput<T> {
    pub fn grid(&self, scale: Scale) -> &PatchGrid<T> {
        match scale {
            Scale::Fine => &self.fine,
            Scale::Medium => &self.medium,
            Scale::Coarse => &self.coarse,
        }
    }
}

/// Copies the square window of side `size` centered at (r, c). Callers are
/// responsible for bounds; a window leaving the image is a hard fault.
pub fn cut_window<T: Float>(img: &Raster<T>, center: (usize, usize), size: usize) -> Raster<T> {
    let half = size / 2;
    let (r0, c0) = (
        center.0 as i64 - half as i64,
        center.1 as i64 - half as i64,
    );
    assert!(
        r0 >= 0
            && c0 >= 0
            && r0 as usize + size <= img.rows()
            && c0 as usize + size <= img.cols(),
        "subwindow {size}x{size} at {center:?} leaves the {}x{} image",
        img.rows(),
        img.cols()
    );
    let (r0, c0) = (r0 as usize, c0 as usize);
    let mut out = Raster::new(size, size, T::default());
    for r in 0..size {
        let src = &img.row(r0 + r)[c0..c0 + size];
        out.as_mut_slice()[r * size..(r + 1) * size].copy_from_slice(src);
    }
    out
}

/// Non-overlapping block averaging by `factor` in each dimension.
pub fn downsample<T: Float>(img: &Raster<T>, factor: usize) -> Raster<T> {
    if factor == 1 {
        return img.clone();
    }
    assert!(img.rows() % factor == 0 && img.cols() % factor == 0);
    let (rows, cols) = (img.rows() / factor, img.cols() / factor);
    let norm = T::c(1.0 / (factor * factor) as f64);
    let mut out = Raster::new(rows, cols, T::default());
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = T::default();
            for dr in 0..factor {
                let row = img.row(r * factor + dr);
                for dc in 0..factor {
                    acc += row[c * factor + dc];
                }
            }
            out.set(r, c, acc * norm);
        }
    }
    out
}

/// In-place stereo patch normalization: per-eye mean removal, then scaling
/// of the 200-vector to unit length. Returns false and zeroes the patch
/// when its raw variance falls below [`MIN_PATCH_VARIANCE`].
pub fn normalize_patch<T: Float>(patch: &mut [T]) -> bool {
    assert_eq!(patch.len(), PATCH_DIM);
    let half = PATCH_DIM / 2;
    for eye in 0..2 {
        let span = &mut patch[eye * half..(eye + 1) * half];
        let mut mean = T::default();
        for &v in span.iter() {
            mean += v;
        }
        mean *= T::c(1.0 / half as f64);
        for v in span.iter_mut() {
            *v -= mean;
        }
    }
    let mut ss = T::default();
    for &v in patch.iter() {
        ss += v * v;
    }
    if ss.f64() / (PATCH_DIM as f64) < MIN_PATCH_VARIANCE {
        patch.fill(T::default());
        false
    } else {
        let inv = T::one() / ss.sqrt();
        for v in patch.iter_mut() {
            *v *= inv;
        }
        true
    }
}

/// Slices two 40x40 windows into 49 stereo patches and normalizes each with
/// [`normalize_patch`].
pub fn cut_and_normalize<T: Float>(
    left: &Raster<T>,
    right: &Raster<T>,
    scale: Scale,
) -> PatchGrid<T> {
    assert_eq!((left.rows(), left.cols()), (FINE_WINDOW, FINE_WINDOW));
    assert_eq!((right.rows(), right.cols()), (FINE_WINDOW, FINE_WINDOW));
    let mut data = vec![T::default(); PATCHES_PER_SCALE * PATCH_DIM];
    let mut valid = [false; PATCHES_PER_SCALE];
    let half = PATCH_SIZE * PATCH_SIZE;

    for gi in 0..GRID_SIDE {
        for gj in 0..GRID_SIDE {
            let idx = gi * GRID_SIDE + gj;
            let (r0, c0) = (gi * PATCH_STRIDE, gj * PATCH_STRIDE);
            let patch = &mut data[idx * PATCH_DIM..(idx + 1) * PATCH_DIM];
            for r in 0..PATCH_SIZE {
                let lrow = &left.row(r0 + r)[c0..c0 + PATCH_SIZE];
                let rrow = &right.row(r0 + r)[c0..c0 + PATCH_SIZE];
                patch[r * PATCH_SIZE..(r + 1) * PATCH_SIZE].copy_from_slice(lrow);
                patch[half + r * PATCH_SIZE..half + (r + 1) * PATCH_SIZE].copy_from_slice(rrow);
            }
            valid[idx] = normalize_patch(patch);
        }
    }
    PatchGrid { scale, data, valid }
}

/// Cuts and normalizes all three scales for the current gaze. Left windows
/// center on the fixation; right windows center `vergence` pixels to the
/// left of it, cancelling that much disparity.
pub fn extract_pyramid<T: Float>(scene: &StereoScene<T>, gaze: &GazeState) -> PyramidInput<T> {
    let (fr, fc) = gaze.fixation;
    let rc = fc as i64 - gaze.vergence as i64;
    assert!(rc >= 0, "vergence pushes right window past the image edge");
    let rc = rc as usize;

    let [fine, medium, coarse] = Scale::ALL.map(|scale| {
        let l = cut_window(&scene.left, (fr, fc), scale.window());
        let r = cut_window(&scene.right, (fr, rc), scale.window());
        let f = scale.downsample();
        cut_and_normalize(&downsample(&l, f), &downsample(&r, f), scale)
    });
    PyramidInput { fine, medium, coarse }
}
