use super::{dot, Real};
use crate::{Error, Result};

/// Affine map `y = weight * x + bias` with a row-major `d_out x d_in` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn new(d_in: usize, d_out: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::contract("linear layer dims must be >= 1"));
        }
        if weight.len() != d_in * d_out || bias.len() != d_out {
            return Err(Error::contract(format!(
                "linear params for {d_in}->{d_out} need {} weights and {d_out} biases, got {} and {}",
                d_in * d_out,
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear params".into()));
        }
        Ok(Self { d_in, d_out, weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        let mut weight = vec![T::zero(); d * d];
        for i in 0..d {
            weight[i * d + i] = T::one();
        }
        Self { d_in: d, d_out: d, weight, bias: vec![T::zero(); d] }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { d_in, d_out, weight: vec![T::zero(); d_in * d_out], bias: vec![T::zero(); d_out] }
    }

    pub fn row(&self, o: usize) -> &[T] {
        &self.weight[o * self.d_in..(o + 1) * self.d_in]
    }

    /// Single-vector application without the batch wrapper.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.d_in);
        (0..self.d_out).map(|o| dot(self.row(o), x) + self.bias[o]).collect()
    }

    /// `weight^T * g`, the input cotangent of [`Self::apply`].
    pub fn apply_transpose(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.d_in];
        for (o, &go) in g.iter().enumerate() {
            for (dst, &w) in out.iter_mut().zip(self.row(o)) {
                *dst = *dst + w * go;
            }
        }
        out
    }
}

/// Gradients of [`linear_apply`].
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads<T> {
    pub input: Vec<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn linear_apply<T: Real>(x: &[Vec<T>], p: &LinearParams<T>) -> Result<Vec<Vec<T>>> {
    if let Some(bad) = x.iter().find(|row| row.len() != p.d_in) {
        return Err(Error::contract(format!(
            "linear_apply: input dim {} but layer expects {}",
            bad.len(),
            p.d_in
        )));
    }
    Ok(x.iter().map(|row| p.apply(row)).collect())
}

pub fn linear_backward<T: Real>(
    x: &[Vec<T>],
    p: &LinearParams<T>,
    upstream: &[Vec<T>],
) -> Result<LinearGrads<T>> {
    if x.len() != upstream.len()
        || x.iter().any(|r| r.len() != p.d_in)
        || upstream.iter().any(|r| r.len() != p.d_out)
    {
        return Err(Error::contract("linear_backward: shape mismatch"));
    }
    let mut weight = vec![T::zero(); p.weight.len()];
    let mut bias = vec![T::zero(); p.d_out];
    for (row, g) in x.iter().zip(upstream) {
        for (o, &go) in g.iter().enumerate() {
            bias[o] = bias[o] + go;
            for (dst, &xi) in weight[o * p.d_in..(o + 1) * p.d_in].iter_mut().zip(row) {
                *dst = *dst + go * xi;
            }
        }
    }
    let input = upstream.iter().map(|g| p.apply_transpose(g)).collect();
    Ok(LinearGrads { input, weight, bias })
}

fn row_moments<T: Real>(row: &[T]) -> (T, T) {
    let d = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    (mean, var)
}

/// Normalizes each row over its `d` entries, then applies the affine `gamma`, `beta_ln`.
pub fn layer_normalize<T: Real>(
    x: &[Vec<T>],
    gamma: &[T],
    beta_ln: &[T],
    eps: T,
) -> Result<Vec<Vec<T>>> {
    let d = gamma.len();
    if d == 0 || beta_ln.len() != d || x.iter().any(|r| r.len() != d) {
        return Err(Error::contract("layer_normalize: dimension mismatch"));
    }
    if eps <= T::zero() {
        return Err(Error::contract("layer_normalize: eps must be positive"));
    }
    Ok(x.iter()
        .map(|row| {
            let (mean, var) = row_moments(row);
            let inv = T::one() / (var + eps).sqrt();
            row.iter()
                .zip(gamma.iter().zip(beta_ln))
                .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
                .collect()
        })
        .collect())
}

/// Gradients of [`layer_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormGrads<T> {
    pub input: Vec<Vec<T>>,
    pub gamma: Vec<T>,
    pub beta_ln: Vec<T>,
}

pub fn layer_normalize_backward<T: Real>(
    x: &[Vec<T>],
    gamma: &[T],
    eps: T,
    upstream: &[Vec<T>],
) -> Result<LayerNormGrads<T>> {
    let d = gamma.len();
    if x.len() != upstream.len()
        || x.iter().chain(upstream).any(|r| r.len() != d)
    {
        return Err(Error::contract("layer_normalize_backward: shape mismatch"));
    }
    let dn = T::of(d as f64);
    let mut ggamma = vec![T::zero(); d];
    let mut gbeta = vec![T::zero(); d];
    let mut input = Vec::with_capacity(x.len());
    for (row, g) in x.iter().zip(upstream) {
        let (mean, var) = row_moments(row);
        let inv = T::one() / (var + eps).sqrt();
        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
        let gxhat: Vec<T> = g.iter().zip(gamma).map(|(&a, &b)| a * b).collect();
        for i in 0..d {
            ggamma[i] = ggamma[i] + g[i] * xhat[i];
            gbeta[i] = gbeta[i] + g[i];
        }
        let mean_g = gxhat.iter().copied().sum::<T>() / dn;
        let mean_gx = dot(&gxhat, &xhat) / dn;
        input.push(
            gxhat.iter().zip(&xhat).map(|(&gh, &xh)| inv * (gh - mean_g - xh * mean_gx)).collect(),
        );
    }
    Ok(LayerNormGrads { input, gamma: ggamma, beta_ln: gbeta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer() {
        let p = LinearParams::<f64>::identity(2);
        assert_eq!(linear_apply(&[vec![2.0, 4.0]], &p).unwrap(), vec![vec![2.0, 4.0]]);
    }

    #[test]
    fn direct_evaluation() {
        let p = LinearParams::new(2, 1, vec![1.0, 1.0], vec![1.0]).unwrap();
        assert_eq!(linear_apply(&[vec![2.0, 3.0]], &p).unwrap(), vec![vec![6.0]]);
    }

    #[test]
    fn mismatched_input_dim() {
        let p = LinearParams::<f64>::identity(2);
        assert!(matches!(linear_apply(&[vec![1.0, 2.0, 3.0]], &p), Err(Error::Contract(_))));
        assert!(LinearParams::<f64>::new(2, 2, vec![0.0; 3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let y = layer_normalize(&[vec![3.0f64; 4]], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y[0].iter().all(|&v| v == 0.0));
        let y = layer_normalize(&[vec![3.0f64; 2]], &[1.0; 2], &[0.5, -1.0], 1e-5).unwrap();
        assert_eq!(y[0], vec![0.5, -1.0]);
    }

    #[test]
    fn layer_norm_two_values() {
        let y = layer_normalize(&[vec![2.0f64, 4.0]], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((y[0][0] + 1.0).abs() < 1e-9 && (y[0][1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_output_moments() {
        let x = vec![vec![0.3f64, -1.2, 4.0, 2.2, 0.0, 7.5]];
        let y = layer_normalize(&x, &[1.0; 6], &[0.0; 6], 1e-5).unwrap();
        let mean = y[0].iter().sum::<f64>() / 6.0;
        let var = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        assert!(layer_normalize(&[vec![1.0f64]], &[1.0], &[0.0], 0.0).is_err());
    }
}
