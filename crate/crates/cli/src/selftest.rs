//! Randomized property suites behind `selftest`.
//!
//! Every suite reports its worst case as one [`MetricsRecord`]. With
//! `corrupt_haar` the analysis output is perturbed before use, which the
//! reconstruction and energy suites must catch.

use dgdetr_core::daqs::{project_out_style, QuerySet, StyleEmbedding};
use dgdetr_core::numcore::{channel_stats, dot, SIGMA_EPS};
use dgdetr_core::styleaug::{normalization_perturbation, sample_noise, wavenp_forward, WaveNPConfig};
use dgdetr_core::wavelet::{dwt2, idwt2, Band, SubBands};
use dgdetr_core::{FeatureMap, Real, RngStream, Shape4};
use dgdetr_toydetr::matcher::hungarian_match;
use dgdetr_toydetr::scene::generate_scene;
use dgdetr_toydetr::DomainSpec;

use crate::config::Precision;
use crate::error::Result;
use crate::metrics::{MetricsRecord, Provenance};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelftestOptions {
    pub cases: usize,
    pub seed: u64,
    pub dtype: Precision,
    pub corrupt_haar: bool,
}

/// Per-precision tolerances.
struct Tolerances {
    reconstruction: f64,
    parseval: f64,
    detail_bands: f64,
    projection: f64,
}

impl Tolerances {
    fn of(dtype: Precision) -> Self {
        match dtype {
            Precision::F32 => Self { reconstruction: 1e-5, parseval: 1e-4, detail_bands: 1e-5, projection: 1e-5 },
            Precision::F64 => Self { reconstruction: 1e-10, parseval: 1e-12, detail_bands: 1e-10, projection: 1e-12 },
        }
    }
}

pub fn run(opts: &SelftestOptions) -> Result<Vec<MetricsRecord>> {
    match opts.dtype {
        Precision::F32 => run_typed::<f32>(opts),
        Precision::F64 => run_typed::<f64>(opts),
    }
}

fn run_typed<T: Real>(opts: &SelftestOptions) -> Result<Vec<MetricsRecord>> {
    let tol = Tolerances::of(opts.dtype);
    let root = RngStream::new(opts.seed);
    let p = opts.dtype.name();
    let prop = Provenance::Property;
    let mut out = vec![
        MetricsRecord::at_most(format!("reconstruction_{p}"), reconstruction::<T>(opts, &root.derive(1))?, tol.reconstruction, prop),
        MetricsRecord::at_most(format!("parseval_{p}"), parseval::<T>(opts, &root.derive(2)), tol.parseval, prop),
        MetricsRecord::at_most(format!("wavenp_detail_bands_{p}"), detail_bands::<T>(opts, &root.derive(3))?, tol.detail_bands, prop),
        MetricsRecord::at_most(format!("np_statistics_{p}"), np_statistics::<T>(opts, &root.derive(4))?, 1e-4, prop),
    ];
    let (orth, idem, noop) = projection::<T>(opts, &root.derive(5))?;
    out.push(MetricsRecord::at_most(format!("daqs_orthogonality_{p}"), orth, tol.projection, prop));
    out.push(MetricsRecord::at_most(format!("daqs_idempotence_{p}"), idem, tol.projection, prop));
    out.push(MetricsRecord::at_most(format!("daqs_zero_alpha_noop_{p}"), noop, 0.0, prop));
    out.push(MetricsRecord::at_most("matching_vs_brute_force", matching(opts, &root.derive(6))?, 0.0, prop));
    out.push(MetricsRecord::at_most("determinism", determinism::<T>(opts.seed)?, 0.0, prop));
    out.extend(golden(opts.corrupt_haar)?);
    Ok(out)
}

fn random_map<T: Real>(rng: &mut RngStream, shape: Shape4, scale: f64) -> FeatureMap<T> {
    FeatureMap::from_fn(shape, |_, c, _, _| T::of(scale * rng.uniform_range(-1.0, 1.0) + 0.3 * c as f64))
}

fn random_shape(rng: &mut RngStream, even: bool) -> Shape4 {
    let (n, c) = (1 + rng.below(2), 1 + rng.below(8));
    if even {
        Shape4::new(n, c, 2 * (1 + rng.below(16)), 2 * (1 + rng.below(16)))
    } else {
        Shape4::new(n, c, 1 + rng.below(32), 1 + rng.below(32))
    }
}

fn analyze<T: Real>(f: &FeatureMap<T>, corrupt: bool) -> SubBands<T> {
    let mut bands = dwt2(f);
    if corrupt {
        // Simulates a wrong filter tap in the width high-pass.
        let lh = bands.band_mut(Band::Lh);
        *lh = lh.map(|v| v * T::of(1.01) + T::of(1e-3));
    }
    bands
}

/// Worst `|idwt2(dwt2(x)) - x|` over even and odd shapes up to 2x8x32x32.
fn reconstruction<T: Real>(opts: &SelftestOptions, root: &RngStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..opts.cases {
        let mut rng = root.derive(i as u64);
        let shape = random_shape(&mut rng, i % 2 == 0);
        let f = random_map::<T>(&mut rng, shape, 1.0);
        let back = idwt2(&analyze(&f, opts.corrupt_haar))?;
        worst = worst.max(back.max_abs_diff(&f)?.as_f64());
    }
    Ok(worst)
}

/// Worst relative energy gap on even shapes.
fn parseval<T: Real>(opts: &SelftestOptions, root: &RngStream) -> f64 {
    (0..opts.cases)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let shape = random_shape(&mut rng, true);
            let f = random_map::<T>(&mut rng, shape, 1.0);
            let e = f.sum_sq().as_f64();
            ((e - analyze(&f, opts.corrupt_haar).energy().as_f64()) / e).abs()
        })
        .fold(0.0, f64::max)
}

/// Worst change of the detail bands under low-band WaveNP.
fn detail_bands<T: Real>(opts: &SelftestOptions, root: &RngStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..opts.cases {
        let mut rng = root.derive(i as u64);
        let shape = random_shape(&mut rng, true);
        let f = random_map::<T>(&mut rng, shape, 1.0);
        let cfg = WaveNPConfig { sigma_np: rng.uniform_range(0.0, 1.5), ..WaveNPConfig::default() };
        let (out, _) = wavenp_forward(&f, &mut rng, &cfg)?;
        let (a, b) = (dwt2(&f), dwt2(&out));
        for band in [Band::Lh, Band::Hl, Band::Hh] {
            worst = worst.max(a.band(band).max_abs_diff(b.band(band))?.as_f64());
        }
    }
    Ok(worst)
}

/// Worst gap between perturbed channel statistics and their targets,
/// over channels with `sigma > 1e-3`.
fn np_statistics<T: Real>(opts: &SelftestOptions, root: &RngStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..opts.cases {
        let mut rng = root.derive(i as u64);
        let shape = Shape4::new(1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(10), 1 + rng.below(10));
        let f = random_map::<T>(&mut rng, shape, 2.0);
        let noise = sample_noise::<T>(&mut rng, shape.n, shape.c, &WaveNPConfig::default());
        let before = channel_stats(&f);
        let after = channel_stats(&normalization_perturbation(&f, &noise)?);
        for p in 0..shape.planes() {
            let sigma = before.sigma[p].as_f64();
            if sigma <= 1e-3 {
                continue;
            }
            let mu_target = noise.beta_np[p].as_f64() * before.mu[p].as_f64();
            let sigma_target = noise.alpha_np[p].as_f64().abs() * sigma * sigma / (sigma + SIGMA_EPS);
            worst = worst.max((after.mu[p].as_f64() - mu_target).abs());
            worst = worst.max((after.sigma[p].as_f64() - sigma_target).abs());
        }
    }
    Ok(worst)
}

/// Worst scaled inner product with the style axis, worst idempotence gap,
/// and worst change at `proj_alpha = 0`.
fn projection<T: Real>(opts: &SelftestOptions, root: &RngStream) -> Result<(f64, f64, f64)> {
    let (mut orth, mut idem, mut noop) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..opts.cases {
        let mut rng = root.derive(i as u64);
        let (n_q, d) = (1 + rng.below(20), 1 + rng.below(16));
        let q = QuerySet::new(n_q, d, (0..n_q * d).map(|_| T::of(rng.uniform_range(-3.0, 3.0))).collect())?;
        let s = StyleEmbedding::from_vector((0..d).map(|_| T::of(rng.uniform_range(-2.0, 2.0))).collect());
        let once = project_out_style(&q, &s, T::one())?;
        let twice = project_out_style(&once, &s, T::one())?;
        let s_norm = dot(&s.s, &s.s).as_f64().sqrt();
        for (row, orig) in once.rows().zip(q.rows()) {
            let scale = dot(orig, orig).as_f64().sqrt() * s_norm + 1.0;
            orth = orth.max(dot(row, &s.s).as_f64().abs() / scale);
        }
        for (a, b) in once.tokens.iter().zip(&twice.tokens) {
            idem = idem.max((a.as_f64() - b.as_f64()).abs());
        }
        let zero = project_out_style(&q, &s, T::zero())?;
        for (a, b) in zero.tokens.iter().zip(&q.tokens) {
            noop = noop.max((a.as_f64() - b.as_f64()).abs());
        }
    }
    Ok((orth, idem, noop))
}

fn brute_force(cost: &[f64], k: usize, m: usize, col: usize, used: &mut [bool]) -> f64 {
    if col == m {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for row in 0..k {
        if !used[row] {
            used[row] = true;
            best = best.min(cost[row * m + col] + brute_force(cost, k, m, col + 1, used));
            used[row] = false;
        }
    }
    best
}

/// Number of cost matrices with `m <= 5` where the matcher misses the
/// exhaustive optimum.
fn matching(opts: &SelftestOptions, root: &RngStream) -> Result<f64> {
    let mut misses = 0usize;
    for i in 0..opts.cases {
        let mut rng = root.derive(i as u64);
        let m = 1 + rng.below(5);
        let k = m + rng.below(4);
        let cost: Vec<f64> = (0..k * m).map(|_| rng.uniform() * 10.0).collect();
        let r = hungarian_match(&cost, k, m)?;
        let oracle = brute_force(&cost, k, m, 0, &mut vec![false; k]);
        if (r.total_cost - oracle).abs() > 1e-9 {
            misses += 1;
        }
    }
    Ok(misses as f64)
}

/// Number of byte-level differences between two identical-seed runs of
/// scene generation and WaveNP.
fn determinism<T: Real>(seed: u64) -> Result<f64> {
    let mut mismatches = 0usize;
    for domain in DomainSpec::shifted_presets() {
        let a = generate_scene(&mut RngStream::new(seed), &domain);
        let b = generate_scene(&mut RngStream::new(seed), &domain);
        mismatches += usize::from(a.image.to_dgfm_bytes() != b.image.to_dgfm_bytes() || a.boxes != b.boxes);
    }
    let f = random_map::<T>(&mut RngStream::new(seed), Shape4::new(2, 4, 12, 10), 1.0);
    let cfg = WaveNPConfig::default();
    let (a, _) = wavenp_forward(&f, &mut RngStream::new(seed ^ 1), &cfg)?;
    let (b, _) = wavenp_forward(&f, &mut RngStream::new(seed ^ 1), &cfg)?;
    mismatches += usize::from(a.to_dgfm_bytes() != b.to_dgfm_bytes());
    Ok(mismatches as f64)
}

/// Hand-computed cases: the 2x2 Haar block `[[1, 2], [3, 4]]` and the
/// assignment `[[1, 2], [2, 1]]`.
fn golden(corrupt: bool) -> Result<Vec<MetricsRecord>> {
    let f = FeatureMap::<f64>::new(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0])?;
    let b = analyze(&f, corrupt);
    let expected = [(Band::Ll, 5.0f64), (Band::Lh, 1.0), (Band::Hl, 2.0), (Band::Hh, 0.0)];
    let haar = expected.iter().map(|&(band, v)| (b.band(band).data()[0] - v).abs()).fold(0.0, f64::max);
    let m = hungarian_match(&[1.0, 2.0, 2.0, 1.0], 2, 2)?;
    let ok = m.pairs == [(0, 0), (1, 1)];
    Ok(vec![
        MetricsRecord::at_most("haar_2x2_block", haar, 1e-12, Provenance::Golden),
        MetricsRecord::at_most("assignment_2x2", if ok { (m.total_cost - 2.0).abs() } else { 1.0 }, 1e-12, Provenance::Golden),
    ])
}
