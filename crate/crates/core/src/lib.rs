//! Core engine for joint development of binocular disparity perception and
//! fusional vergence control.
//!
//! The crate is organized around a closed perception/action loop:
//!
//! - [`env`] synthesizes or loads stereo scenes with ground-truth disparity
//!   and models gaze/vergence kinematics,
//! - [`pyramid`] cuts the three-scale binocular patch pyramid around the
//!   current gaze,
//! - [`gassom`] encodes patches as subspace energies and learns the
//!   per-scale subspace dictionaries online,
//! - [`policy`] pools energies into feature vectors and maps them to
//!   discrete vergence actions (parallel and hierarchical architectures),
//! - [`learner`] computes intrinsic rewards from reconstruction error and
//!   trains every policy network with a natural actor-critic rule.
//!
//! All numerics are generic over the scalar type via [`Float`]; `f32` is the
//! fast training scalar, `f64` the reference scalar for tight invariants.

pub mod env;
pub mod gassom;
pub mod learner;
pub mod policy;
pub mod pyramid;
pub mod raster;
pub mod seeds;

/// Scalar abstraction for all core math. Implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Display
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; the standard way constants enter
    /// generic code.
    fn c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    /// Lossless widening to `f64` (both supported scalars widen exactly).
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// Discrete vergence action set, in pixels of vergence change per step.
/// Ordering is part of the public contract: policy outputs, probe matrices
/// and greedy tie-breaking all index into this array.
pub const VERGENCE_ACTIONS: [i32; 11] = [-16, -8, -4, -2, -1, 0, 1, 2, 4, 8, 16];

// Concrete aliases for the main entry types.
pub type Scene32 = env::StereoScene<f32>;
pub type Scene64 = env::StereoScene<f64>;
pub type Pyramid32 = pyramid::PyramidInput<f32>;
pub type Pyramid64 = pyramid::PyramidInput<f64>;
pub type Dictionary32 = gassom::SubspaceDictionary<f32>;
pub type Dictionary64 = gassom::SubspaceDictionary<f64>;
pub type Agent32 = learner::Agent<f32>;
pub type Agent64 = learner::Agent<f64>;
