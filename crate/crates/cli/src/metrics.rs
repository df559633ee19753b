//! Machine-readable outputs shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Property,
    Golden,
    Experiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub provenance: Provenance,
}

impl MetricsRecord {
    /// Passes when `value` is finite and at most `tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64, provenance: Provenance) -> Self {
        Self { name: name.into(), value, tolerance, passed: value.is_finite() && value <= tolerance, provenance }
    }

    /// Passes when `value` is at least `threshold`; the threshold is
    /// recorded as the tolerance.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance: threshold,
            passed: value.is_finite() && value >= threshold,
            provenance: Provenance::Experiment,
        }
    }

    /// Measured quantity with no pass criterion.
    pub fn observed(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), value, tolerance: 0.0, passed: value.is_finite(), provenance: Provenance::Experiment }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_metrics(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_json(&dir.join("metrics.json"), records)
}

/// One aligned line per record, failures flagged.
pub fn print_records(records: &[MetricsRecord]) {
    let width = records.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in records {
        let status = if r.passed { "ok  " } else { "FAIL" };
        println!("{status} {:<width$}  {:>12.4e}  (tol {:.1e})", r.name, r.value, r.tolerance);
    }
}
