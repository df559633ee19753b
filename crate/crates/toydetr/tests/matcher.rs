use dgdetr_core::RngStream;
use dgdetr_toydetr::matcher::hungarian_match;

/// Minimum over all injections of `m` columns into `k` rows.
fn brute_force(cost: &[f64], k: usize, m: usize) -> f64 {
    fn go(cost: &[f64], k: usize, m: usize, col: usize, used: &mut Vec<bool>) -> f64 {
        if col == m {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for row in 0..k {
            if !used[row] {
                used[row] = true;
                best = best.min(cost[row * m + col] + go(cost, k, m, col + 1, used));
                used[row] = false;
            }
        }
        best
    }
    go(cost, k, m, 0, &mut vec![false; k])
}

fn check(cost: &[f64], k: usize, m: usize) {
    let r = hungarian_match(cost, k, m).unwrap();
    assert_eq!(r.pairs.len(), m);
    let mut rows: Vec<usize> = r.pairs.iter().map(|p| p.0).collect();
    rows.sort_unstable();
    rows.dedup();
    assert_eq!(rows.len(), m, "assignment is not one-to-one");
    let recomputed: f64 = r.pairs.iter().map(|&(p, g)| cost[p * m + g]).sum();
    assert!((recomputed - r.total_cost).abs() < 1e-12);
    let oracle = brute_force(cost, k, m);
    assert!((r.total_cost - oracle).abs() < 1e-9, "{} vs oracle {oracle}", r.total_cost);
}

#[test]
fn matches_exhaustive_search_on_random_matrices() {
    let mut rng = RngStream::new(2024);
    for case in 0..1200 {
        let m = 1 + case % 5;
        let k = m + rng.below(4);
        // Integer costs create ties; continuous ones test the general case.
        let cost: Vec<f64> = (0..k * m)
            .map(|_| if case % 3 == 0 { rng.below(4) as f64 } else { rng.uniform() * 10.0 })
            .collect();
        check(&cost, k, m);
    }
}

#[test]
fn five_by_three_equals_all_sixty_injections() {
    let mut rng = RngStream::new(7);
    for _ in 0..50 {
        let cost: Vec<f64> = (0..15).map(|_| rng.uniform()).collect();
        check(&cost, 5, 3);
    }
}
