use crate::{Error, Result};

/// Outcome of [`finite_diff_vjp_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct VjpReport {
    pub max_rel_error: f64,
    /// Input coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares a hand-written vector-Jacobian product against central differences.
///
/// For every input coordinate `i` the numeric estimate is
/// `<u, (forward(x + h e_i) - forward(x - h e_i)) / 2h>`; the error is
/// `|analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
pub fn finite_diff_vjp_check<F, B>(
    forward: F,
    backward: B,
    x: &[f64],
    u: &[f64],
    h: f64,
) -> Result<VjpReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    B: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let base = forward(x)?;
    if base.len() != u.len() {
        return Err(Error::contract(format!(
            "cotangent has {} entries, forward output has {}",
            u.len(),
            base.len()
        )));
    }
    ensure_finite(&base)?;
    let analytic = backward(x, u)?;
    if analytic.len() != x.len() {
        return Err(Error::contract("backward returned a cotangent of the wrong size"));
    }

    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = forward(&probe)?;
        probe[i] = x[i] - h;
        let minus = forward(&probe)?;
        probe[i] = x[i];
        ensure_finite(&plus)?;
        ensure_finite(&minus)?;
        let d: f64 = plus.iter().zip(&minus).zip(u).map(|((p, m), w)| w * (p - m)).sum();
        numeric.push(d / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(VjpReport { max_rel_error, worst_index, analytic, numeric })
}

fn ensure_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("forward output element {i}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let r = finite_diff_vjp_check(
            |x| Ok(x.to_vec()),
            |_, u| Ok(u.to_vec()),
            &[0.3, -2.0, 5.0],
            &[1.0, 0.5, -3.0],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn square_at_three() {
        let r = finite_diff_vjp_check(
            |x| Ok(vec![x[0] * x[0]]),
            |x, u| Ok(vec![2.0 * x[0] * u[0]]),
            &[3.0],
            &[1.0],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic, vec![6.0]);
        assert!((r.numeric[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn injected_scale_fault_is_reported() {
        let r = finite_diff_vjp_check(
            |x| Ok(vec![x[0] * x[0]]),
            |x, u| Ok(vec![4.0 * x[0] * u[0]]),
            &[3.0],
            &[1.0],
            1e-5,
        )
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let r = finite_diff_vjp_check(
            |x| Ok(vec![1.0 / x[0]]),
            |_, u| Ok(u.to_vec()),
            &[0.0],
            &[1.0],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
