//! Randomized invariants of the wavelet, perturbation and selection operators.

use dgdetr_core::daqs::{
    daqs_forward_with, project_out_style, select_topk, DaqsParams, QuerySet, StyleEmbedding,
};
use dgdetr_core::numcore::{channel_stats, dot, SIGMA_EPS};
use dgdetr_core::styleaug::{
    normalization_perturbation, sample_noise, wavenp_forward, NoiseSample, WaveNPConfig,
};
use dgdetr_core::wavelet::{dwt2, idwt2, Band};
use dgdetr_core::{FeatureMap, LinearParams, RngStream, Shape4};
use proptest::prelude::*;

fn shapes(max_n: usize, max_c: usize, max_hw: usize) -> impl Strategy<Value = Shape4> {
    (1..=max_n, 1..=max_c, 1..=max_hw, 1..=max_hw).prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w))
}

fn even_shapes() -> impl Strategy<Value = Shape4> {
    (1..=2usize, 1..=4usize, 1..=8usize, 1..=8usize).prop_map(|(n, c, h, w)| Shape4::new(n, c, 2 * h, 2 * w))
}

fn random_map<T: dgdetr_core::Real>(shape: Shape4, seed: u64, scale: f64) -> FeatureMap<T> {
    let mut rng = RngStream::new(seed);
    FeatureMap::from_fn(shape, |_, c, _, _| T::of(scale * rng.uniform_range(-1.0, 1.0) + 0.3 * c as f64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reconstruction_f64(shape in shapes(2, 4, 17), seed: u64) {
        let f = random_map::<f64>(shape, seed, 5.0);
        let back = idwt2(&dwt2(&f)).unwrap();
        prop_assert!(back.max_abs_diff(&f).unwrap() <= 1e-10);
    }

    #[test]
    fn reconstruction_f32(shape in shapes(2, 4, 17), seed: u64) {
        let f = random_map::<f32>(shape, seed, 1.0);
        let back = idwt2(&dwt2(&f)).unwrap();
        prop_assert!(back.max_abs_diff(&f).unwrap() <= 1e-5);
    }

    #[test]
    fn parseval_f32(shape in even_shapes(), seed: u64) {
        let f = random_map::<f32>(shape, seed, 1.0);
        let e = f.sum_sq();
        let rel = ((e - dwt2(&f).energy()) / e).abs();
        prop_assert!(rel <= 1e-4, "relative energy gap {rel}");
    }

    #[test]
    fn linearity(shape in shapes(2, 3, 12), a in -3.0f32..3.0, s1: u64, s2: u64) {
        let f = random_map::<f32>(shape, s1, 1.0);
        let g = random_map::<f32>(shape, s2, 1.0);
        let lhs = dwt2(&f.scale_add(a, &g).unwrap());
        let (bf, bg) = (dwt2(&f), dwt2(&g));
        for b in Band::ALL {
            let rhs = bf.band(b).scale_add(a, bg.band(b)).unwrap();
            prop_assert!(lhs.band(b).max_abs_diff(&rhs).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn constant_input(shape in shapes(2, 3, 9), c in -10.0f64..10.0) {
        let b = dwt2(&FeatureMap::filled(shape, c));
        prop_assert!(b.ll.data().iter().all(|&v| (v - 2.0 * c).abs() <= 1e-12));
        for band in [Band::Lh, Band::Hl, Band::Hh] {
            prop_assert!(b.band(band).data().iter().all(|&v| v.abs() <= 1e-12));
        }
    }

    #[test]
    fn wavenp_preserves_detail_bands(shape in even_shapes(), seed: u64, sigma in 0.0f64..1.5) {
        let f = random_map::<f32>(shape, seed, 1.0);
        let cfg = WaveNPConfig { enabled: true, sigma_np: sigma, ..Default::default() };
        let (out, trace) = wavenp_forward(&f, &mut RngStream::new(seed ^ 7), &cfg).unwrap();
        prop_assert!(trace.was_applied());
        let (a, b) = (dwt2(&f), dwt2(&out));
        for band in [Band::Lh, Band::Hl, Band::Hh] {
            prop_assert!(a.band(band).max_abs_diff(b.band(band)).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn np_hits_target_statistics(shape in shapes(2, 4, 10), seed: u64) {
        let f = random_map::<f64>(shape, seed, 2.0);
        let noise: NoiseSample<f64> = sample_noise(&mut RngStream::new(seed), shape.n, shape.c, &WaveNPConfig::default());
        let before = channel_stats(&f);
        let after = channel_stats(&normalization_perturbation(&f, &noise).unwrap());
        for p in 0..shape.planes() {
            let sigma = before.sigma[p];
            if sigma <= 1e-3 {
                continue;
            }
            prop_assert!((after.mu[p] - noise.beta_np[p] * before.mu[p]).abs() <= 1e-4);
            let target = noise.alpha_np[p].abs() * sigma * sigma / (sigma + SIGMA_EPS);
            prop_assert!((after.sigma[p] - target).abs() <= 1e-4);
        }
    }

    #[test]
    fn wavenp_identity_limits(shape in shapes(1, 3, 9), seed: u64) {
        let f = random_map::<f64>(shape, seed, 1.0);
        let off = WaveNPConfig::disabled();
        let (out, _) = wavenp_forward(&f, &mut RngStream::new(seed), &off).unwrap();
        prop_assert_eq!(&out, &f);
        // Zero noise still pays the eps stabilizer: |z| * eps per element.
        let zero = WaveNPConfig { enabled: true, sigma_np: 0.0, ..Default::default() };
        let (out, _) = wavenp_forward(&f, &mut RngStream::new(seed), &zero).unwrap();
        prop_assert!(out.max_abs_diff(&f).unwrap() <= 1e-4);
    }

    #[test]
    fn wavenp_is_deterministic(shape in shapes(2, 3, 9), seed: u64) {
        let f = random_map::<f64>(shape, seed, 1.0);
        let cfg = WaveNPConfig { enabled: true, ..Default::default() };
        let (a, _) = wavenp_forward(&f, &mut RngStream::new(seed), &cfg).unwrap();
        let (b, _) = wavenp_forward(&f, &mut RngStream::new(seed), &cfg).unwrap();
        prop_assert_eq!(a.to_dgfm_bytes(), b.to_dgfm_bytes());
    }
}

fn queries(n_q: usize, d: usize, seed: u64) -> QuerySet<f32> {
    let mut rng = RngStream::new(seed);
    QuerySet::new(n_q, d, (0..n_q * d).map(|_| rng.uniform_range(-3.0, 3.0) as f32).collect()).unwrap()
}

fn style(d: usize, seed: u64) -> StyleEmbedding<f32> {
    let mut rng = RngStream::new(seed);
    StyleEmbedding::from_vector((0..d).map(|_| rng.uniform_range(-2.0, 2.0) as f32).collect())
}

fn norm(v: &[f32]) -> f32 {
    dot(v, v).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn projection_is_orthogonal(n_q in 1..20usize, d in 1..16usize, seed: u64) {
        let (q, s) = (queries(n_q, d, seed), style(d, seed ^ 1));
        let qh = project_out_style(&q, &s, 1.0).unwrap();
        for (row, orig) in qh.rows().zip(q.rows()) {
            let bound = 1e-5 * (norm(orig) * norm(&s.s) + 1.0);
            prop_assert!(dot(row, &s.s).abs() <= bound);
        }
    }

    #[test]
    fn projection_is_idempotent(n_q in 1..20usize, d in 1..16usize, seed: u64) {
        let (q, s) = (queries(n_q, d, seed), style(d, seed ^ 1));
        let once = project_out_style(&q, &s, 1.0).unwrap();
        let twice = project_out_style(&once, &s, 1.0).unwrap();
        for (a, b) in once.tokens.iter().zip(&twice.tokens) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn projection_contracts_norms(n_q in 1..20usize, d in 1..16usize, alpha in 0.0f32..=1.0, seed: u64) {
        let (q, s) = (queries(n_q, d, seed), style(d, seed ^ 1));
        let qh = project_out_style(&q, &s, alpha).unwrap();
        for (row, orig) in qh.rows().zip(q.rows()) {
            prop_assert!(norm(row) <= norm(orig) + 1e-6 * (1.0 + norm(orig)));
        }
    }

    #[test]
    fn projection_interpolates(n_q in 1..12usize, d in 1..12usize, seed: u64) {
        let q64 = QuerySet::new(n_q, d, queries(n_q, d, seed).tokens.iter().map(|&v| v as f64).collect()).unwrap();
        let s64 = StyleEmbedding::from_vector(style(d, seed ^ 1).s.iter().map(|&v| v as f64).collect());
        let full = project_out_style(&q64, &s64, 1.0).unwrap();
        for alpha in [0.0, 0.25, 0.5, 0.75] {
            let mid = project_out_style(&q64, &s64, alpha).unwrap();
            for ((m, a), b) in mid.tokens.iter().zip(&q64.tokens).zip(&full.tokens) {
                prop_assert!((m - ((1.0 - alpha) * a + alpha * b)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_alpha_and_zero_style_are_noops(n_q in 1..12usize, d in 1..12usize, seed: u64) {
        let q = queries(n_q, d, seed);
        prop_assert_eq!(&project_out_style(&q, &style(d, seed), 0.0).unwrap(), &q);
        let zero = StyleEmbedding::from_vector(vec![0.0; d]);
        prop_assert_eq!(&project_out_style(&q, &zero, 1.0).unwrap(), &q);
    }

    #[test]
    fn selection_is_invariant_to_logit_scaling(n_q in 4..30usize, d in 1..8usize, scale in 0.05f64..20.0, seed: u64) {
        let mut rng = RngStream::new(seed);
        let classes = 3;
        let w: Vec<f64> = (0..d * classes).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..classes).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let q = QuerySet::new(n_q, d, (0..n_q * d).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
        let k = 1 + seed as usize % n_q;
        let pick = |scale: f64| {
            let head = LinearParams::new(
                d,
                classes,
                w.iter().map(|v| v * scale).collect(),
                b.iter().map(|v| v * scale).collect(),
            )
            .unwrap();
            let p = DaqsParams {
                es_linear: LinearParams::identity(d),
                es_gamma: vec![1.0; d],
                es_beta: vec![0.0; d],
                ec_head: head,
                k,
                proj_alpha: 1.0,
            };
            select_topk(&q, &p).unwrap().indices
        };
        prop_assert_eq!(pick(1.0), pick(scale));
    }
}

#[test]
fn zero_style_gives_plain_topk() {
    let (c, classes, k) = (4, 3, 5);
    let mut rng = RngStream::new(5);
    let mut rand = |len: usize| (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<f64>>();
    // gamma = beta = 0 forces s = 0.
    let p = DaqsParams {
        es_linear: LinearParams::new(c, c, rand(c * c), rand(c)).unwrap(),
        es_gamma: vec![0.0; c],
        es_beta: vec![0.0; c],
        ec_head: LinearParams::new(c, classes, rand(c * classes), rand(classes)).unwrap(),
        k,
        proj_alpha: 1.0,
    };
    let f = FeatureMap::new(Shape4::new(1, c, 4, 4), rand(c * 16)).unwrap();
    let (res, _) = daqs_forward_with(&f, &p, 1.0, None).unwrap();
    let (plain, _) = daqs_forward_with(&f, &p, 0.0, None).unwrap();
    assert_eq!(res, plain);
    let q = QuerySet::from_feature_map(&f, 0);
    for (j, &i) in res[0].indices.iter().enumerate() {
        assert_eq!(res[0].queries.row(j), q.row(i));
    }
}
