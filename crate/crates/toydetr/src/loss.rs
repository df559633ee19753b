//! Hungarian-matched set loss: cross-entropy and L1 on matched queries,
//! down-weighted background cross-entropy on the rest, and a balanced
//! binary cross-entropy that teaches the selection head which tokens hold
//! objects.

use serde::{Deserialize, Serialize};

use crate::eval::BoxCxCyWh;
use crate::layers::sigmoid;
use crate::matcher::{hungarian_match, MatchResult};
use crate::model::{Prediction, PredictionGrad};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    /// Relative weight of background cross-entropy on unmatched queries.
    pub eos: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, l1: 5.0, eos: 0.1, aux: 1.0 }
    }
}

/// Loss components; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub bg: f64,
    pub box_l1: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &Self) {
        self.cls += other.cls;
        self.bg += other.bg;
        self.box_l1 += other.box_l1;
        self.aux += other.aux;
        self.total += other.total;
    }
}

/// Batch normalizers: matched terms are divided by the number of ground
/// truth objects in the batch, the selection term by the number of images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossScale {
    pub objects: f64,
    pub images: f64,
}

/// `k x m` matching cost `cls * (1 - p_class) + l1 * |box - gt|_1`.
pub fn match_cost(pred: &Prediction, gt: &[(BoxCxCyWh, usize)], w: &LossWeights) -> Vec<f64> {
    let m = gt.len();
    let mut cost = vec![0.0; pred.k * m];
    for i in 0..pred.k {
        let (probs, b) = (pred.prob_row(i), pred.box_row(i));
        for (j, (g, label)) in gt.iter().enumerate() {
            let l1: f64 = b.iter().zip(g).map(|(x, y)| (x - y).abs()).sum();
            cost[i * m + j] = w.cls * (1.0 - probs[*label]) + w.l1 * l1;
        }
    }
    cost
}

pub fn match_prediction(pred: &Prediction, gt: &[(BoxCxCyWh, usize)], w: &LossWeights) -> Result<MatchResult> {
    hungarian_match(&match_cost(pred, gt, w), pred.k, gt.len())
}

/// Token of the `grid x grid` map whose cell contains the box center.
pub fn center_token(b: &BoxCxCyWh, grid: usize) -> usize {
    let cell = |v: f64| ((v * grid as f64) as usize).min(grid - 1);
    cell(b[1]) * grid + cell(b[0])
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// `-log sigmoid(z)` for `y = 1`, `-log(1 - sigmoid(z))` for `y = 0`.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Loss of one image and its cotangent on the prediction.
pub fn detection_loss(
    pred: &Prediction,
    gt: &[(BoxCxCyWh, usize)],
    matching: &MatchResult,
    w: &LossWeights,
    scale: LossScale,
) -> Result<(LossBreakdown, PredictionGrad)> {
    let (k, nc1) = (pred.k, pred.classes);
    let num_classes = nc1 - 1;
    let n_tok = pred.token_logits.len() / num_classes;
    let grid = (n_tok as f64).sqrt().round() as usize;
    if grid * grid != n_tok || matching.pairs.len() != gt.len() {
        return Err(Error::contract("matching or token grid inconsistent with prediction"));
    }
    if matching.pairs.iter().any(|&(p, g)| p >= k || g >= gt.len()) || gt.iter().any(|g| g.1 >= num_classes) {
        return Err(Error::contract("matching indices or labels out of range"));
    }
    let mut out = LossBreakdown::default();
    let mut grad = PredictionGrad {
        logits: vec![0.0; k * nc1],
        boxes: vec![0.0; k * 4],
        token_logits: vec![0.0; pred.token_logits.len()],
    };

    let owner = matching.by_prediction(k);
    for i in 0..k {
        let row = &pred.logits[i * nc1..(i + 1) * nc1];
        let (target, weight) = match owner[i] {
            Some(j) => (gt[j].1, w.cls / scale.objects),
            None => (num_classes, w.cls * w.eos / scale.objects),
        };
        let nll = -log_softmax_at(row, target) * weight;
        if owner[i].is_some() {
            out.cls += nll;
        } else {
            out.bg += nll;
        }
        let probs = pred.prob_row(i);
        for c in 0..nc1 {
            let onehot = if c == target { 1.0 } else { 0.0 };
            grad.logits[i * nc1 + c] = weight * (probs[c] - onehot);
        }
        if let Some(j) = owner[i] {
            let b = pred.box_row(i);
            for (c, (&x, &y)) in b.iter().zip(&gt[j].0).enumerate() {
                out.box_l1 += w.l1 * (x - y).abs() / scale.objects;
                let sign = if x > y { 1.0 } else if x < y { -1.0 } else { 0.0 };
                grad.boxes[i * 4 + c] = w.l1 * sign / scale.objects;
            }
        }
    }

    // Balanced selection-head loss: mean over positives plus mean over
    // negatives.
    let mut target = vec![0.0; pred.token_logits.len()];
    for (b, label) in gt {
        target[center_token(b, grid) * num_classes + label] = 1.0;
    }
    let n_pos = target.iter().filter(|&&y| y == 1.0).count();
    let n_neg = target.len() - n_pos;
    for (i, (&z, &y)) in pred.token_logits.iter().zip(&target).enumerate() {
        let count = if y == 1.0 { n_pos } else { n_neg };
        let weight = w.aux / (count as f64 * scale.images);
        out.aux += weight * bce_with_logit(z, y);
        grad.token_logits[i] = weight * (sigmoid(z) - y);
    }

    out.total = out.cls + out.bg + out.box_l1 + out.aux;
    Ok((out, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_is_stable() {
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logit(800.0, 1.0) < 1e-300);
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn center_token_clamps_to_grid() {
        assert_eq!(center_token(&[0.0, 0.0, 0.1, 0.1], 8), 0);
        assert_eq!(center_token(&[1.0, 1.0, 0.1, 0.1], 8), 63);
        assert_eq!(center_token(&[0.3, 0.6, 0.1, 0.1], 8), 4 * 8 + 2);
    }
}
