//! Component and frequency ablations over paired seeds.
//!
//! Every arm trains from the same seeds, so arm `a` and arm `b` at seed `s`
//! see identical initial weights, training scenes and evaluation scenes and
//! differ only in their switches.

use std::collections::BTreeMap;

use dgdetr_core::styleaug::PerturbTarget;
use serde::{Deserialize, Serialize};

use crate::train::{train, TrainConfig};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Baseline,
    Wavenp,
    Daqs,
    /// WaveNP on the low band plus DAQS; also the low-frequency row.
    Both,
    /// As `Both` but WaveNP perturbs the detail bands.
    HighFreq,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Baseline, Arm::Wavenp, Arm::Daqs, Arm::Both, Arm::HighFreq];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Wavenp => "wavenp",
            Arm::Daqs => "daqs",
            Arm::Both => "both",
            Arm::HighFreq => "high-freq",
        }
    }

    pub fn wavenp(self) -> bool {
        matches!(self, Arm::Wavenp | Arm::Both | Arm::HighFreq)
    }

    pub fn daqs(self) -> bool {
        matches!(self, Arm::Daqs | Arm::Both | Arm::HighFreq)
    }

    /// `base` with this arm's switches applied.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.wavenp.enabled = self.wavenp();
        cfg.model.daqs = self.daqs();
        cfg.model.wavenp.target = match self {
            Arm::HighFreq => PerturbTarget::High,
            _ => PerturbTarget::Low,
        };
        cfg
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: Arm,
    pub seed: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub ap_source: f64,
    pub ap_per_domain: BTreeMap<String, f64>,
}

/// Median, mean and sample standard deviation of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { median: f64::NAN, mean: f64::NAN, std: f64::NAN, n };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { median, mean, std: var.sqrt(), n }
    }
}

/// One ordering relation checked domain by domain on seed medians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub claim: String,
    pub holds_on: Vec<String>,
    pub fails_on: Vec<String>,
    pub required: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub domains: Vec<String>,
    pub runs: Vec<RunResult>,
    /// `arm -> domain -> summary`, with the source domain under `"source"`.
    pub cells: BTreeMap<Arm, BTreeMap<String, Summary>>,
    pub orderings: Vec<Ordering>,
}

impl AblationReport {
    pub fn median(&self, arm: Arm, domain: &str) -> Option<f64> {
        self.cells.get(&arm)?.get(domain).map(|s| s.median)
    }

    pub fn passed(&self) -> bool {
        self.orderings.iter().all(|o| o.passed)
    }
}

pub const SOURCE_COLUMN: &str = "source";

/// Trains every arm on every seed. `progress` sees each finished run.
pub fn run_ablation(
    base: &TrainConfig,
    arms: &[Arm],
    seeds: &[u64],
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationReport> {
    let mut runs = Vec::with_capacity(arms.len() * seeds.len());
    for &arm in arms {
        let cfg = arm.configure(base);
        for &seed in seeds {
            let (_, history) = train(&cfg, seed, None)?;
            let last = history.last().expect("at least one epoch");
            let run = RunResult {
                arm,
                seed,
                first_loss: history[0].loss,
                final_loss: last.loss,
                ap_source: last.ap_source.unwrap_or(f64::NAN),
                ap_per_domain: last.ap_per_domain.clone().unwrap_or_default(),
            };
            progress(&run);
            runs.push(run);
        }
    }
    let domains: Vec<String> = base.domains.iter().map(|d| d.name.clone()).collect();
    Ok(summarize(seeds.to_vec(), domains, runs))
}

/// Aggregates runs and evaluates the directional orderings.
pub fn summarize(seeds: Vec<u64>, domains: Vec<String>, runs: Vec<RunResult>) -> AblationReport {
    let mut cells: BTreeMap<Arm, BTreeMap<String, Summary>> = BTreeMap::new();
    let arms: Vec<Arm> = Arm::ALL.into_iter().filter(|a| runs.iter().any(|r| r.arm == *a)).collect();
    for &arm in &arms {
        let mine: Vec<&RunResult> = runs.iter().filter(|r| r.arm == arm).collect();
        let row = cells.entry(arm).or_default();
        row.insert(SOURCE_COLUMN.into(), Summary::of(&mine.iter().map(|r| r.ap_source).collect::<Vec<_>>()));
        for d in &domains {
            let v: Vec<f64> = mine.iter().filter_map(|r| r.ap_per_domain.get(d).copied()).collect();
            row.insert(d.clone(), Summary::of(&v));
        }
    }
    let mut report = AblationReport { seeds, domains, runs, cells, orderings: Vec::new() };
    report.orderings = orderings(&report);
    report
}

fn compare(report: &AblationReport, claim: &str, required: usize, holds: impl Fn(f64, f64) -> bool, a: Arm, b: Arm) -> Option<Ordering> {
    report.cells.get(&a)?;
    report.cells.get(&b)?;
    let (mut holds_on, mut fails_on) = (Vec::new(), Vec::new());
    for d in &report.domains {
        match (report.median(a, d), report.median(b, d)) {
            (Some(x), Some(y)) if holds(x, y) => holds_on.push(d.clone()),
            _ => fails_on.push(d.clone()),
        }
    }
    let required = required.min(report.domains.len());
    Some(Ordering { claim: claim.into(), passed: holds_on.len() >= required, holds_on, fails_on, required })
}

/// Directional claims over shifted-domain medians: the full method is at
/// least as good as either component alone, DAQS alone is at least the
/// baseline, the full method strictly beats the baseline everywhere, and
/// low-band perturbation beats detail-band perturbation.
pub fn orderings(report: &AblationReport) -> Vec<Ordering> {
    let n = report.domains.len();
    let most = n.saturating_sub(1).max(1);
    let ge = |x: f64, y: f64| x >= y;
    let gt = |x: f64, y: f64| x > y;
    [
        compare(report, "both >= wavenp", most, ge, Arm::Both, Arm::Wavenp),
        compare(report, "both >= daqs", most, ge, Arm::Both, Arm::Daqs),
        compare(report, "daqs >= baseline", most, ge, Arm::Daqs, Arm::Baseline),
        compare(report, "both > baseline", n, gt, Arm::Both, Arm::Baseline),
        compare(report, "low-freq > high-freq", most, gt, Arm::Both, Arm::HighFreq),
    ]
    .into_iter()
    .flatten()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 10.0, 4.0]);
        assert_eq!(s.median, 3.0);
        assert_eq!(s.mean, 4.0);
        assert!((s.std - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[1.0, 2.0]).median, 1.5);
    }

    #[test]
    fn arm_switches() {
        let base = TrainConfig::default();
        let c = Arm::Baseline.configure(&base);
        assert!(!c.model.daqs && !c.model.wavenp.enabled);
        let c = Arm::HighFreq.configure(&base);
        assert!(c.model.daqs && c.model.wavenp.enabled && c.model.wavenp.target == PerturbTarget::High);
        assert_eq!(Arm::Both.configure(&base).model.wavenp.target, PerturbTarget::Low);
    }

    fn run(arm: Arm, seed: u64, aps: [f64; 2]) -> RunResult {
        RunResult {
            arm,
            seed,
            first_loss: 1.0,
            final_loss: 0.5,
            ap_source: 0.5,
            ap_per_domain: [("a".to_string(), aps[0]), ("b".to_string(), aps[1])].into(),
        }
    }

    #[test]
    fn orderings_use_medians() {
        let mut runs = Vec::new();
        for seed in 0..3 {
            let bump = seed as f64 * 0.01;
            runs.push(run(Arm::Baseline, seed, [0.1 + bump, 0.1]));
            runs.push(run(Arm::Wavenp, seed, [0.2, 0.2 + bump]));
            runs.push(run(Arm::Daqs, seed, [0.15, 0.05]));
            runs.push(run(Arm::Both, seed, [0.3, 0.25]));
            runs.push(run(Arm::HighFreq, seed, [0.1, 0.3]));
        }
        let r = summarize(vec![0, 1, 2], vec!["a".into(), "b".into()], runs);
        assert_eq!(r.median(Arm::Baseline, "a"), Some(0.11));
        let by = |c: &str| r.orderings.iter().find(|o| o.claim == c).unwrap().clone();
        assert!(by("both >= wavenp").passed);
        let daqs = by("daqs >= baseline");
        assert_eq!(daqs.holds_on, vec!["a".to_string()]);
        assert!(daqs.passed, "one of two domains suffices");
        assert!(by("both > baseline").passed);
        assert_eq!(by("low-freq > high-freq").fails_on, vec!["b".to_string()]);
    }
}
