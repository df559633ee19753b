//! Source-domain training with Adam, deterministic given `(config, seed)`.
//!
//! Every random choice comes from a stream derived from the seed and the
//! position in training (epoch, scene), so a run resumed from a checkpoint
//! continues exactly as an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use dgdetr_core::RngStream;
use serde::{Deserialize, Serialize};

use crate::evaluate::{evaluate_domains, evaluate_scenes, EvalConfig};
use crate::loss::{detection_loss, match_prediction, LossBreakdown, LossScale, LossWeights};
use crate::model::{ModelConfig, NoiseSource, RunMode, ToyDetr};
use crate::optim::{Adam, AdamConfig};
use crate::scene::{generate_set, DomainSpec, SceneSample};
use crate::{Error, Result};

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_EVAL_DATA: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_NOISE: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay to zero over all steps.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: AdamConfig,
    pub schedule: Schedule,
    pub train_scenes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval: EvalConfig,
    /// Source AP every this many epochs; 0 evaluates only the last epoch.
    pub eval_every: usize,
    /// Shifted domains scored after the last epoch.
    pub domains: Vec<DomainSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: AdamConfig::default(),
            schedule: Schedule::default(),
            train_scenes: 200,
            epochs: 30,
            batch_size: 8,
            eval: EvalConfig::default(),
            eval_every: 1,
            domains: DomainSpec::shifted_presets(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train_scenes == 0 || self.batch_size == 0 || self.eval.scenes == 0 {
            return Err(Error::contract("train_scenes, batch_size and eval.scenes must be >= 1"));
        }
        if !(self.optim.lr >= 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::contract("learning rate must be finite and >= 0"));
        }
        for d in &self.domains {
            d.validate()?;
        }
        Ok(())
    }
}

/// One line of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub components: LossBreakdown,
    pub ap_source: Option<f64>,
    pub ap_per_domain: Option<BTreeMap<String, f64>>,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub seed: u64,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub epochs_done: usize,
}

fn stream(seed: u64, tag: u64) -> RngStream {
    RngStream::new(seed).derive(tag)
}

/// Seed of the scene generator for the training or evaluation set.
pub fn data_seed(seed: u64, eval: bool) -> u64 {
    stream(seed, if eval { STREAM_EVAL_DATA } else { STREAM_TRAIN_DATA }).next_u64()
}

impl TrainState {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = ToyDetr::new(config.model.clone())?;
        let params = model.init_params(&mut stream(seed, STREAM_INIT));
        let adam = Adam::new(params.len());
        Ok(Self { config, seed, params, adam, epochs_done: 0 })
    }

    pub fn model(&self) -> Result<ToyDetr> {
        ToyDetr::new(self.config.model.clone())
    }
}

fn lr_at(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.optim.lr,
        Schedule::Cosine => {
            let progress = step as f64 / total_steps.max(1) as f64;
            cfg.optim.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Loss and accumulated gradient of one batch.
fn batch_gradient(
    model: &ToyDetr,
    params: &[f64],
    scenes: &[&SceneSample],
    rngs: Vec<RngStream>,
    weights: &LossWeights,
    grads: &mut [f64],
) -> Result<LossBreakdown> {
    let scale = LossScale {
        objects: scenes.iter().map(|s| s.boxes.len()).sum::<usize>().max(1) as f64,
        images: scenes.len() as f64,
    };
    let mut total = LossBreakdown::default();
    for (scene, mut rng) in scenes.iter().zip(rngs) {
        let (pred, tape) = model.forward(params, &scene.image, RunMode::Train, NoiseSource::Sample(&mut rng), None)?;
        let gt = scene.ground_truth();
        let matching = match_prediction(&pred, &gt, weights)?;
        let (loss, cot) = detection_loss(&pred, &gt, &matching, weights, scale)?;
        model.backward(params, tape, &cot, grads)?;
        total.add(&loss);
    }
    Ok(total)
}

/// Trains until `until_epoch` epochs are complete, appending one JSON line
/// per epoch to `<out>/epochs.jsonl` when `out` is given.
pub fn run(state: &mut TrainState, until_epoch: usize, out: Option<&Path>) -> Result<Vec<EpochRecord>> {
    let cfg = state.config.clone();
    let model = state.model()?;
    let train_set = generate_set(data_seed(state.seed, false), cfg.train_scenes, &DomainSpec::source());
    let eval_seed = data_seed(state.seed, true);
    let eval_source = generate_set(eval_seed, cfg.eval.scenes, &DomainSpec::source());
    let steps_per_epoch = cfg.train_scenes.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs.max(until_epoch) as u64;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(state.epochs_done > 0)
                .write(true)
                .truncate(state.epochs_done == 0)
                .open(dir.join("epochs.jsonl"))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut grads = vec![0.0; state.params.len()];
    while state.epochs_done < until_epoch {
        let epoch = state.epochs_done;
        let mut order: Vec<usize> = (0..cfg.train_scenes).collect();
        stream(state.seed, STREAM_SHUFFLE).derive(epoch as u64).shuffle(&mut order);
        let noise_root = stream(state.seed, STREAM_NOISE).derive(epoch as u64);

        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scenes: Vec<&SceneSample> = batch.iter().map(|&i| &train_set[i]).collect();
            let rngs = batch.iter().map(|&i| noise_root.derive(i as u64)).collect();
            let loss = batch_gradient(&model, &state.params, &scenes, rngs, &cfg.loss, &mut grads)?;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    detail: format!("loss {} with non-finite values", loss.total),
                });
            }
            Adam::clip(&mut grads, cfg.optim.grad_clip);
            let lr = lr_at(&cfg, state.adam.t, total_steps);
            state.adam.step(&mut state.params, &grads, &cfg.optim, lr);
            sum.add(&loss);
            batches += 1;
        }
        state.epochs_done += 1;

        // Full evaluation belongs to the configured final epoch, so a run
        // split across calls logs the same records as an unbroken one.
        let last = state.epochs_done == until_epoch && state.epochs_done >= cfg.epochs;
        let want_source = last || (cfg.eval_every > 0 && state.epochs_done % cfg.eval_every == 0);
        let ap_source = if want_source {
            Some(evaluate_scenes(&model, &state.params, &eval_source, cfg.eval.score_threshold, cfg.eval.iou_threshold)?.mean)
        } else {
            None
        };
        let ap_per_domain = if last && !cfg.domains.is_empty() {
            let rows = evaluate_domains(&model, &state.params, &cfg.domains, eval_seed, &cfg.eval)?;
            Some(rows.into_iter().map(|r| (r.domain, r.mean)).collect())
        } else {
            None
        };
        let n = batches.max(1) as f64;
        let components = LossBreakdown {
            cls: sum.cls / n,
            bg: sum.bg / n,
            box_l1: sum.box_l1 / n,
            aux: sum.aux / n,
            total: sum.total / n,
        };
        let record = EpochRecord { epoch: state.epochs_done, loss: components.total, components, ap_source, ap_per_domain };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        history.push(record);
    }
    Ok(history)
}

/// Fresh run of `config.epochs` epochs. With `out`, also writes
/// `checkpoint.dgck` there.
pub fn train(config: &TrainConfig, seed: u64, out: Option<&Path>) -> Result<(TrainState, Vec<EpochRecord>)> {
    let mut state = TrainState::new(config.clone(), seed)?;
    let history = run(&mut state, config.epochs, out)?;
    if let Some(dir) = out {
        crate::checkpoint::save(&state, &dir.join("checkpoint.dgck"))?;
    }
    Ok((state, history))
}
