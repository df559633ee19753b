//! Inference-mode detection and per-domain AP tables.

use serde::{Deserialize, Serialize};

use crate::eval::{average_precision, ApReport, Detection};
use crate::model::{NoiseSource, RunMode, ToyDetr};
use crate::scene::{generate_set, DomainSpec, SceneSample};
use crate::Result;

/// One detection per query: its most likely object class, kept when that
/// probability reaches `threshold`.
pub fn detect(model: &ToyDetr, params: &[f64], scene: &SceneSample, threshold: f64) -> Result<Vec<Detection>> {
    let mut unused = dgdetr_core::RngStream::new(0);
    let (pred, _) = model.forward(params, &scene.image, RunMode::Infer, NoiseSource::Sample(&mut unused), None)?;
    let nc = model.config().num_classes;
    Ok((0..pred.k)
        .filter_map(|i| {
            let probs = &pred.prob_row(i)[..nc];
            let (class, &score) = probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            (score >= threshold).then(|| Detection { bbox: pred.box_row(i), class, score })
        })
        .collect())
}

pub fn evaluate_scenes(
    model: &ToyDetr,
    params: &[f64],
    scenes: &[SceneSample],
    threshold: f64,
    iou_threshold: f64,
) -> Result<ApReport> {
    let dets = scenes.iter().map(|s| detect(model, params, s, threshold)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = scenes.iter().map(SceneSample::ground_truth).collect();
    Ok(average_precision(&dets, &gts, model.config().num_classes, iou_threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Evaluation protocol shared by training and the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scenes: usize,
    pub score_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { scenes: 100, score_threshold: 0.05, iou_threshold: 0.5 }
    }
}

/// AP for each domain on scenes that share geometry across domains.
pub fn evaluate_domains(
    model: &ToyDetr,
    params: &[f64],
    domains: &[DomainSpec],
    scene_seed: u64,
    cfg: &EvalConfig,
) -> Result<Vec<DomainRow>> {
    domains
        .iter()
        .map(|d| {
            let scenes = generate_set(scene_seed, cfg.scenes, d);
            let r = evaluate_scenes(model, params, &scenes, cfg.score_threshold, cfg.iou_threshold)?;
            Ok(DomainRow { domain: d.name.clone(), per_class: r.per_class, mean: r.mean })
        })
        .collect()
}
