//! VOC-style average precision at a fixed IoU threshold.

use serde::{Deserialize, Serialize};

/// `(cx, cy, w, h)` in normalized image coordinates.
pub type BoxCxCyWh = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxCxCyWh,
    pub class: usize,
    pub score: f64,
}

pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let corners = |r: &BoxCxCyWh| (r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0);
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // Areas from the corners so identical boxes give exactly 1.
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-class AP and their mean over classes that have ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without ground-truth objects.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// 11-point interpolated AP with greedy, score-ordered matching.
///
/// `detections[i]` and `ground_truth[i]` describe image `i`; ground truth
/// is `(box, class)`. Each ground truth can absorb one true positive; the
/// detection goes to the unclaimed ground truth of its class with the
/// highest IoU, provided it reaches `iou_threshold`.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<(BoxCxCyWh, usize)>],
    num_classes: usize,
    iou_threshold: f64,
) -> ApReport {
    assert_eq!(detections.len(), ground_truth.len(), "one detection list per image");
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|class| class_ap(detections, ground_truth, class, iou_threshold))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    ApReport { per_class, mean }
}

fn class_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<(BoxCxCyWh, usize)>],
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let n_gt: usize = ground_truth.iter().map(|g| g.iter().filter(|o| o.1 == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().filter(|d| d.class == class).map(move |d| (img, d)))
        .collect();
    // Stable sort keeps image order among equal scores.
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut claimed: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (img, det) in ranked {
        let best = ground_truth[img]
            .iter()
            .enumerate()
            .filter(|(j, g)| g.1 == class && !claimed[img][*j])
            .map(|(j, g)| (j, iou(&det.bbox, &g.0)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, overlap)) if overlap >= iou_threshold => {
                claimed[img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let ap = (0..=10)
        .map(|t| {
            let r = t as f64 / 10.0;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0;
    Some(ap)
}
