//! Finite-difference checks of every hand-written backward pass.
//!
//! Each operator is checked on small random inputs with a random
//! cotangent; its record holds the worst relative error over variants.

use dgdetr_core::daqs::{
    daqs_backward, daqs_forward_with, project_out_style, project_out_style_backward, style_embedding,
    style_embedding_backward, DaqsCotangent, DaqsParams, QuerySet, StyleEmbedding,
};
use dgdetr_core::numcore::{finite_diff_vjp_check, ChannelStats};
use dgdetr_core::styleaug::{
    normalization_perturbation, normalization_perturbation_backward, sample_noise, wavenp_backward,
    wavenp_forward_with_noise, PerturbTarget, WaveNPConfig,
};
use dgdetr_core::wavelet::{dwt2, dwt2_backward, idwt2, idwt2_backward, Band, PadInfo, SubBands};
use dgdetr_core::{FeatureMap, LinearParams, RngStream, Shape4};
use dgdetr_toydetr::gradcheck::{model_gradcheck, spread_slice};
use dgdetr_toydetr::loss::LossWeights;
use dgdetr_toydetr::scene::generate_set;
use dgdetr_toydetr::{DomainSpec, ModelConfig, ToyDetr};

use crate::config::GradcheckConfig;
use crate::error::Result;
use crate::metrics::{MetricsRecord, Provenance};

/// Operators in report order.
pub const OPERATORS: [&str; 8] = ["dwt2", "idwt2", "np", "wavenp", "projection", "embedding", "daqs", "toy_model_slice"];

pub fn run(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<MetricsRecord>> {
    let root = RngStream::new(seed);
    let h = cfg.step;
    let errors = [
        check_dwt2(&mut root.derive(0), h)?,
        check_idwt2(&mut root.derive(1), h)?,
        check_np(&mut root.derive(2), h)?,
        check_wavenp(&mut root.derive(3), h)?,
        check_projection(&mut root.derive(4), h)?,
        check_embedding(&mut root.derive(5), h)?,
        check_daqs(&mut root.derive(6), h)?,
        check_model(cfg, seed, h)?,
    ];
    Ok(OPERATORS
        .iter()
        .zip(errors)
        .map(|(&name, err)| {
            let tol = if name == "toy_model_slice" { cfg.model_tolerance } else { cfg.operator_tolerance };
            MetricsRecord::at_most(format!("gradcheck_{name}"), err, tol, Provenance::Property)
        })
        .collect())
}

fn random(rng: &mut RngStream, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
}

fn map(shape: Shape4, data: &[f64]) -> dgdetr_core::Result<FeatureMap<f64>> {
    FeatureMap::new(shape, data.to_vec())
}

fn flatten(b: &SubBands<f64>) -> Vec<f64> {
    Band::ALL.iter().flat_map(|&x| b.band(x).data().to_vec()).collect()
}

fn unflatten(data: &[f64], band_shape: Shape4, pad: PadInfo) -> dgdetr_core::Result<SubBands<f64>> {
    let len = band_shape.len();
    let part = |i: usize| map(band_shape, &data[i * len..(i + 1) * len]);
    SubBands::new(part(0)?, part(1)?, part(2)?, part(3)?, pad)
}

fn check_dwt2(rng: &mut RngStream, h: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (hh, ww) in [(4, 4), (5, 3)] {
        let shape = Shape4::new(1, 2, hh, ww);
        let x = random(rng, shape.len());
        let probe = dwt2(&map(shape, &x)?);
        let (band_shape, pad) = (probe.ll.shape(), probe.pad_info);
        let u = random(rng, band_shape.len() * 4);
        let r = finite_diff_vjp_check(
            |x| Ok(flatten(&dwt2(&map(shape, x)?))),
            |_, u| Ok(dwt2_backward(&unflatten(u, band_shape, pad)?)?.into_data()),
            &x,
            &u,
            h,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn check_idwt2(rng: &mut RngStream, h: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (hh, ww) in [(4, 4), (3, 5)] {
        let shape = Shape4::new(1, 2, hh, ww);
        let bands = dwt2(&map(shape, &random(rng, shape.len()))?);
        let (band_shape, pad) = (bands.ll.shape(), bands.pad_info);
        let u = random(rng, shape.len());
        let r = finite_diff_vjp_check(
            |x| Ok(idwt2(&unflatten(x, band_shape, pad)?)?.into_data()),
            |_, u| Ok(flatten(&idwt2_backward(&map(shape, u)?, pad)?)),
            &flatten(&bands),
            &u,
            h,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn check_np(rng: &mut RngStream, h: f64) -> Result<f64> {
    let shape = Shape4::new(2, 3, 4, 4);
    let x = random(rng, shape.len());
    let u = random(rng, shape.len());
    let noise = sample_noise(rng, 2, 3, &WaveNPConfig::default());
    let r = finite_diff_vjp_check(
        |x| Ok(normalization_perturbation(&map(shape, x)?, &noise)?.into_data()),
        |x, u| Ok(normalization_perturbation_backward(&map(shape, x)?, &noise, &map(shape, u)?)?.into_data()),
        &x,
        &u,
        h,
    )?;
    Ok(r.max_rel_error)
}

fn check_wavenp(rng: &mut RngStream, h: f64) -> Result<f64> {
    let shape = Shape4::new(1, 3, 8, 8);
    let mut worst = 0.0f64;
    for target in [PerturbTarget::Low, PerturbTarget::High] {
        let x = random(rng, shape.len());
        let u = random(rng, shape.len());
        let cfg = WaveNPConfig { target, ..WaveNPConfig::default() };
        let noise: Vec<_> = target.bands().iter().map(|_| sample_noise(rng, 1, 3, &cfg)).collect();
        let r = finite_diff_vjp_check(
            |x| Ok(wavenp_forward_with_noise(&map(shape, x)?, target, noise.clone())?.0.into_data()),
            |x, u| {
                let (_, trace) = wavenp_forward_with_noise(&map(shape, x)?, target, noise.clone())?;
                Ok(wavenp_backward(trace, &map(shape, u)?)?.into_data())
            },
            &x,
            &u,
            h,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn check_projection(rng: &mut RngStream, h: f64) -> Result<f64> {
    let (n_q, d) = (6, 5);
    let x = random(rng, n_q * d + d);
    let u = random(rng, n_q * d);
    let split = |x: &[f64]| -> dgdetr_core::Result<_> {
        Ok((QuerySet::new(n_q, d, x[..n_q * d].to_vec())?, StyleEmbedding::from_vector(x[n_q * d..].to_vec())))
    };
    let mut worst = 0.0f64;
    for alpha in [1.0, 0.4] {
        let r = finite_diff_vjp_check(
            |x| {
                let (q, s) = split(x)?;
                Ok(project_out_style(&q, &s, alpha)?.tokens)
            },
            |x, u| {
                let (q, s) = split(x)?;
                let (gq, gs) = project_out_style_backward(&q, &s, alpha, &QuerySet::new(n_q, d, u.to_vec())?)?;
                Ok([gq.tokens, gs].concat())
            },
            &x,
            &u,
            h,
        )?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn daqs_params(c: usize, classes: usize, k: usize, rng: &mut RngStream) -> dgdetr_core::Result<DaqsParams<f64>> {
    Ok(DaqsParams {
        es_linear: LinearParams::new(c, c, random(rng, c * c), random(rng, c))?,
        es_gamma: random(rng, c).iter().map(|v| 1.0 + 0.3 * v).collect(),
        es_beta: random(rng, c).iter().map(|v| 0.2 * v).collect(),
        ec_head: LinearParams::new(c, classes, random(rng, c * classes), random(rng, classes))?,
        k,
        proj_alpha: 1.0,
    })
}

/// Packs the style and selection parameters; `with_head` adds `E_c`.
fn pack(p: &DaqsParams<f64>, with_head: bool) -> Vec<f64> {
    let mut v = [p.es_linear.weight.clone(), p.es_linear.bias.clone(), p.es_gamma.clone(), p.es_beta.clone()].concat();
    if with_head {
        v.extend_from_slice(&p.ec_head.weight);
        v.extend_from_slice(&p.ec_head.bias);
    }
    v
}

fn unpack(base: &DaqsParams<f64>, x: &[f64]) -> DaqsParams<f64> {
    let mut q = base.clone();
    let mut at = 0;
    let mut take = |dst: &mut Vec<f64>| {
        let len = dst.len();
        if at + len <= x.len() {
            dst.copy_from_slice(&x[at..at + len]);
            at += len;
        }
    };
    take(&mut q.es_linear.weight);
    take(&mut q.es_linear.bias);
    take(&mut q.es_gamma);
    take(&mut q.es_beta);
    take(&mut q.ec_head.weight);
    take(&mut q.ec_head.bias);
    q
}

fn check_embedding(rng: &mut RngStream, h: f64) -> Result<f64> {
    let c = 4;
    let p = daqs_params(c, 3, 2, rng)?;
    let z = random(rng, c);
    let u = random(rng, c);
    let embed = |z: &[f64], p: &DaqsParams<f64>| -> dgdetr_core::Result<Vec<f64>> {
        let stats = ChannelStats { n: 1, c, mu: z.to_vec(), sigma: vec![0.0; c] };
        Ok(style_embedding(&stats, p)?.remove(0).s)
    };
    let input = finite_diff_vjp_check(|z| embed(z, &p), |z, u| Ok(style_embedding_backward(z, &p, u)?.combined), &z, &u, h)?;
    let params = finite_diff_vjp_check(
        |x| embed(&z, &unpack(&p, x)),
        |x, u| {
            let g = style_embedding_backward(&z, &unpack(&p, x), u)?;
            Ok([g.es_weight, g.es_bias, g.es_gamma, g.es_beta].concat())
        },
        &pack(&p, false),
        &u,
        h,
    )?;
    Ok(input.max_rel_error.max(params.max_rel_error))
}

/// Composite selection at frozen indices, for features and parameters.
fn check_daqs(rng: &mut RngStream, h: f64) -> Result<f64> {
    let shape = Shape4::new(2, 4, 3, 3);
    let (classes, k) = (3, 4);
    let p = daqs_params(shape.c, classes, k, rng)?;
    let x: Vec<f64> = random(rng, shape.len()).iter().enumerate().map(|(i, v)| v + 0.1 * (i % 4) as f64).collect();
    let per_image = k * shape.c + k + shape.plane() * classes;
    let mut worst = 0.0f64;
    for alpha in [1.0, 0.5] {
        let (_, trace) = daqs_forward_with(&map(shape, &x)?, &p, alpha, None)?;
        let fixed: Vec<Vec<usize>> = (0..shape.n).map(|n| trace.indices(n).to_vec()).collect();
        let u = random(rng, shape.n * per_image);
        let outputs = |fm: &FeatureMap<f64>, p: &DaqsParams<f64>| -> dgdetr_core::Result<Vec<f64>> {
            let (res, trace) = daqs_forward_with(fm, p, alpha, Some(&fixed))?;
            let mut out = Vec::new();
            for (n, r) in res.iter().enumerate() {
                out.extend_from_slice(&r.queries.tokens);
                out.extend_from_slice(&r.scores);
                out.extend_from_slice(trace.logits(n));
            }
            Ok(out)
        };
        let cotangent = |u: &[f64]| {
            let mut cot = DaqsCotangent::zeros(shape.n, k, shape.c);
            let mut logits = Vec::new();
            for (n, chunk) in u.chunks(per_image).enumerate() {
                cot.queries[n] = chunk[..k * shape.c].to_vec();
                cot.scores[n] = chunk[k * shape.c..k * shape.c + k].to_vec();
                logits.push(chunk[k * shape.c + k..].to_vec());
            }
            cot.logits = Some(logits);
            cot
        };
        let features = finite_diff_vjp_check(
            |x| outputs(&map(shape, x)?, &p),
            |x, u| {
                let (_, trace) = daqs_forward_with(&map(shape, x)?, &p, alpha, Some(&fixed))?;
                Ok(daqs_backward(trace, &cotangent(u))?.features.into_data())
            },
            &x,
            &u,
            h,
        )?;
        let fm = map(shape, &x)?;
        let params = finite_diff_vjp_check(
            |theta| outputs(&fm, &unpack(&p, theta)),
            |theta, u| {
                let (_, trace) = daqs_forward_with(&fm, &unpack(&p, theta), alpha, Some(&fixed))?;
                let g = daqs_backward(trace, &cotangent(u))?;
                Ok([g.es_weight, g.es_bias, g.es_gamma, g.es_beta, g.ec_weight, g.ec_bias].concat())
            },
            &pack(&p, true),
            &u,
            h,
        )?;
        worst = worst.max(features.max_rel_error).max(params.max_rel_error);
    }
    Ok(worst)
}

/// Train-mode loss of the default toy model with noise, selection and
/// matching frozen, on a slice spread across parameter blocks.
fn check_model(cfg: &GradcheckConfig, seed: u64, h: f64) -> Result<f64> {
    let model = ToyDetr::new(ModelConfig::default())?;
    let params = model.init_params(&mut RngStream::new(seed).derive(7));
    let scenes = generate_set(seed, cfg.model_scenes.max(1), &DomainSpec::source());
    let (slice, _) = spread_slice(&model, cfg.model_slice, &mut RngStream::new(seed).derive(8));
    let r = model_gradcheck(&model, &params, &scenes, &LossWeights::default(), &slice, seed, h)?;
    Ok(r.max_rel_error)
}
