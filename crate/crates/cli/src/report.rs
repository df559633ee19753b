//! Aggregates metrics files from a directory tree into markdown and CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::error::{CliError, Result};
use crate::metrics::{MetricsRecord, Provenance};

/// Values of one metric across the runs of a section.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub name: String,
    pub values: Vec<f64>,
    pub passed: usize,
    pub tolerance: f64,
    pub provenance: Provenance,
}

impl Aggregate {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation; zero for a single run.
    pub fn spread(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Runs of one command, in first-seen metric order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub runs: Vec<PathBuf>,
    pub metrics: Vec<Aggregate>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub sections: BTreeMap<String, Section>,
    pub warnings: Vec<String>,
    pub curves: Vec<(PathBuf, Vec<serde_json::Value>)>,
}

fn command_of(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("run_manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("command").and_then(|c| c.as_str()).map(str::to_string))
        .unwrap_or_else(|| "unknown".to_string())
}

/// Reads every `metrics.json` under `root`; malformed files and records
/// are skipped with a warning.
pub fn collect(root: &Path) -> Result<Summary> {
    if !root.is_dir() {
        return Err(CliError::usage(format!("{} is not a directory", root.display())));
    }
    let mut summary = Summary::default();
    let mut entries: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .collect();
    entries.retain(|p| p.is_file());
    for path in entries {
        let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
        let dir = path.parent().unwrap_or(root);
        match path.file_name().and_then(|n| n.to_str()) {
            Some("metrics.json") => read_metrics(&path, &rel, dir, &mut summary),
            Some("epochs.jsonl") => read_curve(&path, &rel, &mut summary),
            _ => {}
        }
    }
    if summary.sections.is_empty() {
        return Err(CliError::usage(format!("no readable metrics.json under {}", root.display())));
    }
    Ok(summary)
}

fn read_metrics(path: &Path, rel: &Path, dir: &Path, summary: &mut Summary) {
    let parsed = std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str::<Vec<serde_json::Value>>(&t).map_err(|e| e.to_string()));
    let values = match parsed {
        Ok(v) => v,
        Err(e) => {
            summary.warnings.push(format!("skipped {}: {e}", rel.display()));
            return;
        }
    };
    let section = summary.sections.entry(command_of(dir)).or_default();
    section.runs.push(rel.to_path_buf());
    for (i, v) in values.into_iter().enumerate() {
        let record: MetricsRecord = match serde_json::from_value(v) {
            Ok(r) => r,
            Err(e) => {
                summary.warnings.push(format!("skipped record {i} of {}: {e}", rel.display()));
                continue;
            }
        };
        match section.metrics.iter_mut().find(|a| a.name == record.name) {
            Some(a) => {
                a.values.push(record.value);
                a.passed += usize::from(record.passed);
            }
            None => section.metrics.push(Aggregate {
                name: record.name,
                values: vec![record.value],
                passed: usize::from(record.passed),
                tolerance: record.tolerance,
                provenance: record.provenance,
            }),
        }
    }
}

fn read_curve(path: &Path, rel: &Path, summary: &mut Summary) {
    let Ok(text) = std::fs::read_to_string(path) else {
        summary.warnings.push(format!("skipped unreadable {}", rel.display()));
        return;
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(v) => rows.push(v),
            Err(e) => summary.warnings.push(format!("skipped line {} of {}: {e}", i + 1, rel.display())),
        }
    }
    summary.curves.push((rel.to_path_buf(), rows));
}

/// Fixed notation for ordinary magnitudes, scientific for tiny ones.
fn num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.6}")
    }
}

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::Property => "property",
        Provenance::Golden => "golden",
        Provenance::Experiment => "experiment",
    }
}

pub fn markdown(summary: &Summary) -> String {
    let mut s = String::from("# Run summary\n");
    for (command, section) in &summary.sections {
        let n = section.runs.len();
        let _ = writeln!(s, "\n## {command} ({n} run{})\n", if n == 1 { "" } else { "s" });
        if n == 1 {
            s.push_str("| metric | value | tolerance | passed | provenance |\n|---|---|---|---|---|\n");
            for a in &section.metrics {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.1e} | {} | {} |",
                    a.name,
                    num(a.values[0]),
                    a.tolerance,
                    if a.passed == 1 { "yes" } else { "no" },
                    provenance_name(a.provenance)
                );
            }
        } else {
            s.push_str("| metric | mean ± spread | min | max | n | passed | provenance |\n|---|---|---|---|---|---|---|\n");
            for a in &section.metrics {
                let min = a.values.iter().copied().fold(f64::INFINITY, f64::min);
                let max = a.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let _ = writeln!(
                    s,
                    "| {} | {} ± {} | {} | {} | {} | {}/{} | {} |",
                    a.name,
                    num(a.mean()),
                    num(a.spread()),
                    num(min),
                    num(max),
                    a.values.len(),
                    a.passed,
                    a.values.len(),
                    provenance_name(a.provenance)
                );
            }
        }
    }
    if !summary.warnings.is_empty() {
        s.push_str("\n## Warnings\n\n");
        for w in &summary.warnings {
            let _ = writeln!(s, "- {w}");
        }
    }
    s
}

pub fn csv(summary: &Summary) -> String {
    let mut s = String::from("section,metric,n,mean,spread,min,max,passed,tolerance,provenance\n");
    for (command, section) in &summary.sections {
        for a in &section.metrics {
            let min = a.values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = a.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                s,
                "{command},\"{}\",{},{:e},{:e},{:e},{:e},{},{:e},{}",
                a.name.replace('"', "'"),
                a.values.len(),
                a.mean(),
                a.spread(),
                min,
                max,
                a.passed,
                a.tolerance,
                provenance_name(a.provenance)
            );
        }
    }
    s
}

/// Loss and source AP per epoch for every training log found.
pub fn curves_csv(summary: &Summary) -> String {
    let mut s = String::from("run,epoch,loss,ap_source\n");
    for (path, rows) in &summary.curves {
        for r in rows {
            let num = |k: &str| r.get(k).and_then(|v| v.as_f64()).map_or(String::new(), |v| format!("{v:.9}"));
            let _ = writeln!(s, "{},{},{},{}", path.display(), num("epoch"), num("loss"), num("ap_source"));
        }
    }
    s
}

pub fn write(summary: &Summary, out: &Path) -> Result<()> {
    std::fs::write(out.join("report.md"), markdown(summary))?;
    std::fs::write(out.join("report.csv"), csv(summary))?;
    if !summary.curves.is_empty() {
        std::fs::write(out.join("loss_curves.csv"), curves_csv(summary))?;
    }
    Ok(())
}
