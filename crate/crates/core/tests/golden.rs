//! Regression against DGFM dumps produced by an independent PyWavelets/numpy
//! oracle (`tests/golden/generate.py`).

use std::path::PathBuf;

use dgdetr_core::styleaug::{normalization_perturbation, wavenp_forward_with_noise, NoiseSample, PerturbTarget};
use dgdetr_core::wavelet::{dwt2, idwt2, Band};
use dgdetr_core::{FeatureMap, Real};

fn load<T: Real>(name: &str) -> FeatureMap<T> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    FeatureMap::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn check_bands<T: Real>(stem: &str, tol: f64) {
    let input = load::<T>(&format!("{stem}.in"));
    let bands = dwt2(&input);
    for b in Band::ALL {
        let want = load::<T>(&format!("{stem}.{}", b.suffix()));
        let diff = bands.band(b).max_abs_diff(&want).unwrap().as_f64();
        assert!(diff <= tol, "{stem} {b:?}: {diff:e}");
    }
    let back = idwt2(&bands).unwrap();
    assert!(back.max_abs_diff(&input).unwrap().as_f64() <= tol);
}

#[test]
fn haar_even_f64() {
    check_bands::<f64>("haar_even", 1e-12);
}

#[test]
fn haar_odd_f64() {
    check_bands::<f64>("haar_odd", 1e-12);
}

#[test]
fn haar_f32() {
    check_bands::<f32>("haar_f32", 1e-6);
}

fn noise() -> NoiseSample<f64> {
    let (alpha, beta) = (load::<f64>("wavenp.alpha"), load::<f64>("wavenp.beta"));
    let s = alpha.shape();
    NoiseSample { n: s.n, c: s.c, alpha_np: alpha.into_data(), beta_np: beta.into_data() }
}

#[test]
fn normalization_perturbation_trace() {
    let ll = dwt2(&load::<f64>("wavenp.in")).ll;
    let out = normalization_perturbation(&ll, &noise()).unwrap();
    assert!(out.max_abs_diff(&load("np.out")).unwrap() <= 1e-12);
}

#[test]
fn wavenp_trace() {
    let (out, _) = wavenp_forward_with_noise(&load::<f64>("wavenp.in"), PerturbTarget::Low, vec![noise()]).unwrap();
    assert!(out.max_abs_diff(&load("wavenp.out")).unwrap() <= 1e-12);
}
