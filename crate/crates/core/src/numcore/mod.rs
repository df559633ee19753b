//! Numeric foundation shared by every other module.
//!
//! Feature maps are stored channel-major as `(n, c, h, w)` so that a single
//! `(sample, channel)` plane is contiguous; per-channel statistics and
//! separable spatial filtering both walk planes.

mod feature_map;
mod gradcheck;
mod linear;
mod rng;
mod stats;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub use feature_map::{FeatureMap, Shape4};
pub use gradcheck::{finite_diff_vjp_check, VjpReport};
pub use linear::{
    layer_normalize, layer_normalize_backward, linear_apply, linear_backward, LayerNormGrads,
    LinearGrads, LinearParams,
};
pub use rng::{sample_gaussian, RngStream};
pub use stats::{channel_stats, channel_stats_backward, ChannelStats};
pub(crate) use stats::plane_stats;

/// Stabilizer added to every division by a standard deviation.
pub const SIGMA_EPS: f64 = 1e-5;

/// Storage precision of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Byte width, which doubles as the tag in the `DGFM` dump format.
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating-point element type of every differentiable operation.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dot product of two equally long slices.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
