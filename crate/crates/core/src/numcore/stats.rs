use super::{FeatureMap, Real};
use crate::{Error, Result};

/// Per-`(sample, channel)` spatial mean and population standard deviation.
///
/// `mu` and `sigma` are `n * c` long, indexed `n * c_count + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub n: usize,
    pub c: usize,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> ChannelStats<T> {
    pub fn mu_at(&self, n: usize, c: usize) -> T {
        self.mu[n * self.c + c]
    }

    pub fn sigma_at(&self, n: usize, c: usize) -> T {
        self.sigma[n * self.c + c]
    }

    /// Row `n` of `mu + sigma`, the input of the style encoder.
    pub fn combined_row(&self, n: usize) -> Vec<T> {
        let r = n * self.c..(n + 1) * self.c;
        self.mu[r.clone()].iter().zip(&self.sigma[r]).map(|(&m, &s)| m + s).collect()
    }
}

/// Mean and standard deviation of one plane (divisor `len`).
pub(crate) fn plane_stats<T: Real>(plane: &[T]) -> (T, T) {
    let count = T::of(plane.len() as f64);
    let mean = plane.iter().copied().sum::<T>() / count;
    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
    (mean, var.max(T::zero()).sqrt())
}

/// Statistics over the spatial axes only; never mixes samples.
pub fn channel_stats<T: Real>(f: &FeatureMap<T>) -> ChannelStats<T> {
    let s = f.shape();
    let (mu, sigma) = f.planes().map(plane_stats).unzip();
    ChannelStats { n: s.n, c: s.c, mu, sigma }
}

/// Vector-Jacobian product of [`channel_stats`].
///
/// `d sigma / d x_j = (x_j - mu) / (hw * sigma)`; constant planes
/// (`sigma == 0`) contribute no `sigma` gradient.
pub fn channel_stats_backward<T: Real>(
    f: &FeatureMap<T>,
    stats: &ChannelStats<T>,
    grad_mu: &[T],
    grad_sigma: &[T],
) -> Result<FeatureMap<T>> {
    let s = f.shape();
    if stats.n != s.n || stats.c != s.c || grad_mu.len() != s.planes() || grad_sigma.len() != s.planes()
    {
        return Err(Error::contract("channel_stats_backward: cotangent shape mismatch"));
    }
    let count = T::of(s.plane() as f64);
    let mut out = FeatureMap::zeros(s);
    for (p, (src, dst)) in f.planes().zip(out.data_mut().chunks_mut(s.plane())).enumerate() {
        let mu = stats.mu[p];
        let sigma = stats.sigma[p];
        let gm = grad_mu[p] / count;
        let gs = if sigma > T::zero() { grad_sigma[p] / (count * sigma) } else { T::zero() };
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = gm + gs * (x - mu);
        }
    }
    Ok(out)
}
