//! WaveNP: normalization perturbation restricted to the low-frequency band.
//!
//! A forward pass analyses the feature map with [`dwt2`], re-affines the
//! `ll` band with noise-scaled copies of its own channel statistics and
//! synthesises the result with [`idwt2`]. Detail bands pass through
//! untouched, so edges and shapes survive the style change.
//!
//! The inverted variant ([`PerturbTarget::High`]) perturbs `lh`, `hl` and
//! `hh` instead and exists only for the frequency ablation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::numcore::{
    channel_stats, plane_stats, sample_gaussian, FeatureMap, Real, RngStream, Shape4, SIGMA_EPS,
};
use crate::wavelet::{dwt2, dwt2_backward, idwt2, idwt2_backward, Band, SubBands};
use crate::{Error, Result};

/// Multiplicative noise on channel statistics, one value per `(sample, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample<T> {
    pub n: usize,
    pub c: usize,
    /// Scales the standard deviation.
    pub alpha_np: Vec<T>,
    /// Scales the mean.
    pub beta_np: Vec<T>,
}

impl<T: Real> NoiseSample<T> {
    pub fn constant(n: usize, c: usize, alpha_np: T, beta_np: T) -> Self {
        Self { n, c, alpha_np: vec![alpha_np; n * c], beta_np: vec![beta_np; n * c] }
    }

    pub fn identity(n: usize, c: usize) -> Self {
        Self::constant(n, c, T::one(), T::one())
    }
}

/// Which sub-bands receive the perturbation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbTarget {
    #[default]
    Low,
    High,
}

impl PerturbTarget {
    pub fn bands(self) -> &'static [Band] {
        match self {
            PerturbTarget::Low => &[Band::Ll],
            PerturbTarget::High => &[Band::Lh, Band::Hl, Band::Hh],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveNPConfig {
    /// Training-mode flag; disabled means the identity.
    pub enabled: bool,
    /// Standard deviation of the mean-one noise.
    pub sigma_np: f64,
    /// Probability that a given call perturbs its batch.
    pub apply_prob: f64,
    /// Backbone stages whose outputs are perturbed.
    pub stages: BTreeSet<usize>,
    pub target: PerturbTarget,
}

impl Default for WaveNPConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma_np: 0.5,
            apply_prob: 1.0,
            stages: BTreeSet::from([1, 2]),
            target: PerturbTarget::Low,
        }
    }
}

impl WaveNPConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_np >= 0.0 && self.sigma_np.is_finite()) {
            return Err(Error::contract(format!("sigma_np must be >= 0, got {}", self.sigma_np)));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::contract(format!("apply_prob must lie in [0, 1], got {}", self.apply_prob)));
        }
        Ok(())
    }

    pub fn applies_at(&self, stage: usize) -> bool {
        self.enabled && self.stages.contains(&stage)
    }
}

/// Draws `alpha_np` then `beta_np`, both `Normal(1, sigma_np^2)`.
pub fn sample_noise<T: Real>(rng: &mut RngStream, n: usize, c: usize, cfg: &WaveNPConfig) -> NoiseSample<T> {
    let sigma = T::of(cfg.sigma_np);
    let alpha_np = sample_gaussian(rng, T::one(), sigma, n * c);
    let beta_np = sample_gaussian(rng, T::one(), sigma, n * c);
    NoiseSample { n, c, alpha_np, beta_np }
}

fn check_noise<T: Real>(shape: Shape4, noise: &NoiseSample<T>) -> Result<()> {
    if noise.n != shape.n
        || noise.c != shape.c
        || noise.alpha_np.len() != shape.planes()
        || noise.beta_np.len() != shape.planes()
    {
        return Err(Error::contract(format!(
            "noise is {}x{} but feature map is {shape}",
            noise.n, noise.c
        )));
    }
    Ok(())
}

/// `y = alpha*sigma * (x - mu) / (sigma + eps) + beta*mu`, per channel.
pub fn normalization_perturbation<T: Real>(
    f_ll: &FeatureMap<T>,
    noise: &NoiseSample<T>,
) -> Result<FeatureMap<T>> {
    check_noise(f_ll.shape(), noise)?;
    let eps = T::of(SIGMA_EPS);
    let stats = channel_stats(f_ll);
    let mut out = f_ll.clone();
    let plane = f_ll.shape().plane();
    for (p, dst) in out.data_mut().chunks_mut(plane).enumerate() {
        let (mu, sigma) = (stats.mu[p], stats.sigma[p]);
        let scale = noise.alpha_np[p] * sigma / (sigma + eps);
        let shift = noise.beta_np[p] * mu;
        for v in dst.iter_mut() {
            *v = scale * (*v - mu) + shift;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`normalization_perturbation`] with the noise
/// held fixed, differentiating through the channel statistics.
pub fn normalization_perturbation_backward<T: Real>(
    f_ll: &FeatureMap<T>,
    noise: &NoiseSample<T>,
    upstream: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    check_noise(f_ll.shape(), noise)?;
    f_ll.check_same_shape(upstream)?;
    let eps = T::of(SIGMA_EPS);
    let plane = f_ll.shape().plane();
    let count = T::of(plane as f64);
    let mut out = FeatureMap::zeros(f_ll.shape());
    for (p, ((x, u), dst)) in f_ll
        .planes()
        .zip(upstream.planes())
        .zip(out.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let (mu, sigma) = plane_stats(x);
        let (alpha, beta) = (noise.alpha_np[p], noise.beta_np[p]);
        let scale = alpha * sigma / (sigma + eps);
        let u_mean = u.iter().copied().sum::<T>() / count;
        let coupling = if sigma > T::zero() {
            let dscale = alpha * eps / ((sigma + eps) * (sigma + eps));
            let ux: T = u.iter().zip(x).map(|(&ui, &xi)| ui * (xi - mu)).sum();
            ux * dscale / (count * sigma)
        } else {
            T::zero()
        };
        for ((d, &uj), &xj) in dst.iter_mut().zip(u).zip(x) {
            *d = scale * (uj - u_mean) + coupling * (xj - mu) + beta * u_mean;
        }
    }
    Ok(out)
}

/// Everything [`wavenp_backward`] needs from a forward call.
#[derive(Clone, Debug)]
pub struct WaveNPTrace<T> {
    shape: Shape4,
    perturbed: Option<Perturbation<T>>,
}

#[derive(Clone, Debug)]
struct Perturbation<T> {
    bands: SubBands<T>,
    target: PerturbTarget,
    noise: Vec<NoiseSample<T>>,
}

impl<T: Real> WaveNPTrace<T> {
    /// Whether the forward call actually changed its input.
    pub fn was_applied(&self) -> bool {
        self.perturbed.is_some()
    }

    /// Noise used per perturbed band, in [`PerturbTarget::bands`] order.
    pub fn noise(&self) -> &[NoiseSample<T>] {
        self.perturbed.as_ref().map(|p| p.noise.as_slice()).unwrap_or(&[])
    }

    pub fn target(&self) -> Option<PerturbTarget> {
        self.perturbed.as_ref().map(|p| p.target)
    }
}

/// Training-time forward pass. Returns `f` unchanged when disabled or when
/// the `apply_prob` draw fails.
pub fn wavenp_forward<T: Real>(
    f: &FeatureMap<T>,
    rng: &mut RngStream,
    cfg: &WaveNPConfig,
) -> Result<(FeatureMap<T>, WaveNPTrace<T>)> {
    cfg.validate()?;
    let identity = || (f.clone(), WaveNPTrace { shape: f.shape(), perturbed: None });
    if !cfg.enabled {
        return Ok(identity());
    }
    if rng.uniform() >= cfg.apply_prob {
        return Ok(identity());
    }
    let s = f.shape();
    let noise = cfg.target.bands().iter().map(|_| sample_noise(rng, s.n, s.c, cfg)).collect();
    wavenp_forward_with_noise(f, cfg.target, noise)
}

/// Forward pass with caller-supplied noise, one sample per target band.
pub fn wavenp_forward_with_noise<T: Real>(
    f: &FeatureMap<T>,
    target: PerturbTarget,
    noise: Vec<NoiseSample<T>>,
) -> Result<(FeatureMap<T>, WaveNPTrace<T>)> {
    if noise.len() != target.bands().len() {
        return Err(Error::contract(format!(
            "{target:?} target needs {} noise samples, got {}",
            target.bands().len(),
            noise.len()
        )));
    }
    let bands = dwt2(f);
    let mut perturbed = bands.clone();
    for (&band, sample) in target.bands().iter().zip(&noise) {
        *perturbed.band_mut(band) = normalization_perturbation(bands.band(band), sample)?;
    }
    let out = idwt2(&perturbed)?;
    let trace = WaveNPTrace {
        shape: f.shape(),
        perturbed: Some(Perturbation { bands, target, noise }),
    };
    Ok((out, trace))
}

/// Chains synthesis-backward, perturbation-backward and analysis-backward.
/// The trace is consumed; an upstream of the wrong shape is rejected.
pub fn wavenp_backward<T: Real>(trace: WaveNPTrace<T>, upstream: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if upstream.shape() != trace.shape {
        return Err(Error::contract(format!(
            "wavenp_backward: cotangent {} does not match forward output {}",
            upstream.shape(),
            trace.shape
        )));
    }
    let Some(p) = trace.perturbed else {
        return Ok(upstream.clone());
    };
    let mut g = idwt2_backward(upstream, p.bands.pad_info)?;
    for (&band, sample) in p.target.bands().iter().zip(&p.noise) {
        let gb = normalization_perturbation_backward(p.bands.band(band), sample, g.band(band))?;
        *g.band_mut(band) = gb;
    }
    dwt2_backward(&g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(shape: Shape4, seed: u64) -> FeatureMap<f64> {
        let mut rng = RngStream::new(seed);
        FeatureMap::from_fn(shape, |_, c, _, _| rng.uniform_range(-1.0, 1.0) * (c as f64 + 1.0) + 0.5)
    }

    #[test]
    fn zero_sigma_gives_unit_noise() {
        let cfg = WaveNPConfig { sigma_np: 0.0, ..Default::default() };
        let s: NoiseSample<f64> = sample_noise(&mut RngStream::new(1), 2, 3, &cfg);
        assert!(s.alpha_np.iter().chain(&s.beta_np).all(|&v| v == 1.0));
    }

    #[test]
    fn noise_is_deterministic() {
        let cfg = WaveNPConfig::default();
        let a: NoiseSample<f64> = sample_noise(&mut RngStream::new(5), 2, 4, &cfg);
        let b: NoiseSample<f64> = sample_noise(&mut RngStream::new(5), 2, 4, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn noise_moments() {
        let cfg = WaveNPConfig::default();
        let s: NoiseSample<f64> = sample_noise(&mut RngStream::new(77), 1, 100_000, &cfg);
        let m = s.alpha_np.iter().sum::<f64>() / 1e5;
        let sd = (s.alpha_np.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 1e5).sqrt();
        assert!((sd - 0.5).abs() < 0.01, "std {sd}");
    }

    /// Channels alternating between two values, so every standardized
    /// deviation is exactly 1.
    fn two_level_map(shape: Shape4) -> FeatureMap<f64> {
        FeatureMap::from_fn(shape, |n, c, y, x| {
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            0.3 * (n + c) as f64 + sign * (1.0 + c as f64)
        })
    }

    #[test]
    fn identity_noise_is_near_identity() {
        let f = two_level_map(Shape4::new(2, 3, 4, 4));
        let y = normalization_perturbation(&f, &NoiseSample::identity(2, 3)).unwrap();
        assert!(y.max_abs_diff(&f).unwrap() <= 1e-5);

        // In general the residual is eps * |x - mu| / (sigma + eps).
        let f = random_map(Shape4::new(2, 3, 4, 4), 3);
        let st = channel_stats(&f);
        let y = normalization_perturbation(&f, &NoiseSample::identity(2, 3)).unwrap();
        for (p, (a, b)) in f.planes().zip(y.planes()).enumerate() {
            for (&x, &v) in a.iter().zip(b) {
                let bound = SIGMA_EPS * (x - st.mu[p]).abs() / (st.sigma[p] + SIGMA_EPS);
                assert!((x - v).abs() <= bound * 1.0001 + 1e-15);
            }
        }
    }

    #[test]
    fn zero_mean_channel() {
        let f = FeatureMap::<f64>::new(Shape4::new(1, 1, 1, 2), vec![-1.0, 1.0]).unwrap();
        let y = normalization_perturbation(&f, &NoiseSample::constant(1, 1, 2.0, 5.0)).unwrap();
        assert!((y.data()[0] + 2.0).abs() < 1e-4 && (y.data()[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn constant_channel_keeps_only_the_mean_term() {
        let f = FeatureMap::<f64>::filled(Shape4::new(1, 1, 2, 2), 2.0);
        let y = normalization_perturbation(&f, &NoiseSample::constant(1, 1, 0.7, 3.0)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }

    #[test]
    fn noise_shape_mismatch() {
        let f = random_map(Shape4::new(1, 2, 2, 2), 1);
        assert!(normalization_perturbation(&f, &NoiseSample::identity(1, 3)).is_err());
    }

    #[test]
    fn disabled_is_bitwise_identity() {
        let f = random_map(Shape4::new(1, 2, 6, 6), 9);
        let (y, trace) = wavenp_forward(&f, &mut RngStream::new(0), &WaveNPConfig::disabled()).unwrap();
        assert_eq!(y, f);
        assert!(!trace.was_applied());
        let g = random_map(Shape4::new(1, 2, 6, 6), 10);
        assert_eq!(wavenp_backward(trace, &g).unwrap(), g);
    }

    #[test]
    fn zero_apply_prob_skips() {
        let f = random_map(Shape4::new(1, 2, 4, 4), 2);
        let cfg = WaveNPConfig { apply_prob: 0.0, ..Default::default() };
        let (y, trace) = wavenp_forward(&f, &mut RngStream::new(0), &cfg).unwrap();
        assert_eq!(y, f);
        assert!(!trace.was_applied());
    }

    #[test]
    fn detail_bands_survive() {
        let f = random_map(Shape4::new(2, 3, 8, 8), 4);
        let (y, _) = wavenp_forward(&f, &mut RngStream::new(12), &WaveNPConfig::default()).unwrap();
        let (a, b) = (dwt2(&f), dwt2(&y));
        for band in [Band::Lh, Band::Hl, Band::Hh] {
            assert!(a.band(band).max_abs_diff(b.band(band)).unwrap() < 1e-12);
        }
        assert!(a.ll.max_abs_diff(&b.ll).unwrap() > 1e-3);
    }

    #[test]
    fn high_target_keeps_low_band() {
        let f = random_map(Shape4::new(1, 2, 8, 8), 4);
        let cfg = WaveNPConfig { target: PerturbTarget::High, ..Default::default() };
        let (y, trace) = wavenp_forward(&f, &mut RngStream::new(12), &cfg).unwrap();
        assert_eq!(trace.noise().len(), 3);
        assert!(dwt2(&f).ll.max_abs_diff(&dwt2(&y).ll).unwrap() < 1e-12);
    }

    #[test]
    fn zero_sigma_round_trips() {
        let shape = Shape4::new(1, 3, 4, 4);
        let bands = SubBands::unpadded(
            two_level_map(shape),
            random_map(shape, 1),
            random_map(shape, 2),
            random_map(shape, 3),
        )
        .unwrap();
        let f = idwt2(&bands).unwrap();
        let cfg = WaveNPConfig { sigma_np: 0.0, ..Default::default() };
        let (y, _) = wavenp_forward(&f, &mut RngStream::new(1), &cfg).unwrap();
        assert!(y.max_abs_diff(&f).unwrap() <= 1e-5);
    }

    #[test]
    fn stale_cotangent_is_rejected() {
        let f = random_map(Shape4::new(1, 1, 4, 4), 6);
        let (_, trace) = wavenp_forward(&f, &mut RngStream::new(1), &WaveNPConfig::default()).unwrap();
        let wrong = FeatureMap::zeros(Shape4::new(1, 1, 4, 6));
        assert!(matches!(wavenp_backward(trace, &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_config() {
        let f = random_map(Shape4::new(1, 1, 4, 4), 6);
        let cfg = WaveNPConfig { apply_prob: 1.5, ..Default::default() };
        assert!(wavenp_forward(&f, &mut RngStream::new(1), &cfg).is_err());
        let cfg = WaveNPConfig { sigma_np: -0.1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
