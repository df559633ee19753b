//! Exact minimum-cost assignment of ground-truth objects to predictions.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One-to-one pairing; predictions absent from `pairs` count as background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction, ground truth)`, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchResult {
    /// Ground truth matched to each prediction, if any.
    pub fn by_prediction(&self, k: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; k];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// Hungarian algorithm with potentials, `O(m^2 k)`.
///
/// `cost` is row-major `k x m` (predictions by ground truth). Every ground
/// truth receives a distinct prediction.
pub fn hungarian_match(cost: &[f64], k: usize, m: usize) -> Result<MatchResult> {
    if cost.len() != k * m {
        return Err(Error::contract(format!("cost has {} entries, expected {k}x{m}", cost.len())));
    }
    if m > k {
        return Err(Error::contract(format!("{m} ground truths cannot be matched to {k} predictions")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::contract("cost matrix has non-finite entries"));
    }
    if m == 0 {
        return Ok(MatchResult { pairs: Vec::new(), total_cost: 0.0 });
    }
    // Rows are ground truths (1-based), columns predictions (1-based);
    // column 0 is the virtual start.
    let a = |row: usize, col: usize| cost[(col - 1) * m + (row - 1)];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; k + 1];
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for row in 1..=m {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_v = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=k {
                if used[col] {
                    continue;
                }
                let reduced = a(r0, col) - u[r0] - v[col];
                if reduced < min_v[col] {
                    min_v[col] = reduced;
                    way[col] = col0;
                }
                if min_v[col] < delta {
                    delta = min_v[col];
                    col1 = col;
                }
            }
            for col in 0..=k {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_v[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=k).filter(|&c| owner[c] != 0).map(|c| (c - 1, owner[c] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    let total_cost = pairs.iter().map(|&(p, g)| cost[p * m + g]).sum();
    Ok(MatchResult { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_entry() {
        let r = hungarian_match(&[0.3], 1, 1).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
    }

    #[test]
    fn two_by_two() {
        let r = hungarian_match(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn more_ground_truth_than_predictions_is_rejected() {
        assert!(matches!(hungarian_match(&[0.0; 6], 2, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn rectangular_prefers_cheap_rows() {
        // 3 predictions, 1 ground truth: the cheapest prediction wins.
        let r = hungarian_match(&[5.0, 0.5, 2.0], 3, 1).unwrap();
        assert_eq!(r.pairs, vec![(1, 0)]);
        assert_eq!(r.by_prediction(3), vec![None, Some(0), None]);
    }

    #[test]
    fn empty_ground_truth() {
        let r = hungarian_match(&[], 4, 0).unwrap();
        assert!(r.pairs.is_empty());
    }
}
