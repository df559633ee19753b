//! Wavelet-guided style perturbation and style-debiased query selection
//! for detection transformers.
//!
//! The crate is split the same way the pipeline is:
//!
//! * [`numcore`] holds feature maps, channel statistics, linear and
//!   layer-norm primitives, the seeded RNG and the finite-difference oracle.
//! * [`wavelet`] is a single-level orthonormal 2-D Haar transform.
//! * [`styleaug`] perturbs the channel statistics of the low-frequency band
//!   (WaveNP).
//! * [`daqs`] builds a style embedding from channel statistics, projects it
//!   out of flattened encoder tokens and picks the top-K queries.
//!
//! Every differentiable operation ships with a hand-written backward pass.

pub mod daqs;
mod error;
pub mod numcore;
pub mod styleaug;
pub mod wavelet;

pub use error::{Error, Result};
pub use numcore::{ChannelStats, DType, FeatureMap, LinearParams, Real, RngStream, Shape4};
