//! Finite-difference check of the full model on a parameter slice.

use dgdetr_core::numcore::{finite_diff_vjp_check, VjpReport};
use dgdetr_core::RngStream;

use crate::loss::{detection_loss, match_prediction, LossScale, LossWeights};
use crate::matcher::MatchResult;
use crate::model::{NoiseSource, RunMode, StageNoise, ToyDetr};
use crate::scene::SceneSample;
use crate::Result;

/// One coordinate from each of `count` blocks spread evenly over the
/// layout, at a random position inside the block.
pub fn spread_slice(model: &ToyDetr, count: usize, rng: &mut RngStream) -> (Vec<usize>, Vec<String>) {
    let blocks = model.layout().blocks();
    let picks = count.min(blocks.len());
    (0..picks)
        .map(|i| {
            let b = &blocks[i * blocks.len() / picks];
            (b.offset + rng.below(b.len()), b.name.clone())
        })
        .unzip()
}

struct Frozen {
    noise: StageNoise,
    indices: Vec<usize>,
    matching: MatchResult,
}

/// Checks the gradient of the train-mode batch loss with WaveNP noise,
/// selected indices and matching all frozen at their values in the first
/// pass.
pub fn model_gradcheck(
    model: &ToyDetr,
    params: &[f64],
    scenes: &[SceneSample],
    weights: &LossWeights,
    slice: &[usize],
    seed: u64,
    h: f64,
) -> Result<VjpReport> {
    let scale = LossScale {
        objects: scenes.iter().map(|s| s.boxes.len()).sum::<usize>().max(1) as f64,
        images: scenes.len() as f64,
    };
    let mut frozen = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let mut rng = RngStream::new(seed).derive(i as u64);
        let (pred, tape) = model.forward(params, &s.image, RunMode::Train, NoiseSource::Sample(&mut rng), None)?;
        let matching = match_prediction(&pred, &s.ground_truth(), weights)?;
        frozen.push(Frozen { noise: tape.noise().clone(), indices: tape.indices().to_vec(), matching });
    }
    let with_slice = |x: &[f64]| {
        let mut p = params.to_vec();
        for (&i, &v) in slice.iter().zip(x) {
            p[i] = v;
        }
        p
    };
    let forward = |x: &[f64]| -> dgdetr_core::Result<Vec<f64>> {
        let p = with_slice(x);
        let mut total = 0.0;
        for (s, f) in scenes.iter().zip(&frozen) {
            let (pred, _) = model
                .forward(&p, &s.image, RunMode::Train, NoiseSource::Replay(&f.noise), Some(&f.indices))
                .map_err(to_core)?;
            let (loss, _) = detection_loss(&pred, &s.ground_truth(), &f.matching, weights, scale).map_err(to_core)?;
            total += loss.total;
        }
        Ok(vec![total])
    };
    let backward = |x: &[f64], u: &[f64]| -> dgdetr_core::Result<Vec<f64>> {
        let p = with_slice(x);
        let mut grads = vec![0.0; p.len()];
        for (s, f) in scenes.iter().zip(&frozen) {
            let (pred, tape) = model
                .forward(&p, &s.image, RunMode::Train, NoiseSource::Replay(&f.noise), Some(&f.indices))
                .map_err(to_core)?;
            let (_, g) = detection_loss(&pred, &s.ground_truth(), &f.matching, weights, scale).map_err(to_core)?;
            model.backward(&p, tape, &g, &mut grads).map_err(to_core)?;
        }
        Ok(slice.iter().map(|&i| grads[i] * u[0]).collect())
    };
    let x: Vec<f64> = slice.iter().map(|&i| params[i]).collect();
    Ok(finite_diff_vjp_check(forward, backward, &x, &[1.0], h)?)
}

fn to_core(e: crate::Error) -> dgdetr_core::Error {
    match e {
        crate::Error::Core(c) => c,
        other => dgdetr_core::Error::Contract(other.to_string()),
    }
}
