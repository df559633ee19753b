//! `train`, `eval` and `ablate`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dgdetr_toydetr::ablation::{run_ablation, AblationReport, Arm, SOURCE_COLUMN};
use dgdetr_toydetr::evaluate::{evaluate_domains, DomainRow};
use dgdetr_toydetr::scene::CLASS_NAMES;
use dgdetr_toydetr::train::{data_seed, run as run_training, EpochRecord};
use dgdetr_toydetr::{checkpoint, TrainConfig, TrainState};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::metrics::{write_json, MetricsRecord};

/// Trains from scratch, or continues `resume` up to the configured epochs.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    let mut state = match resume {
        Some(path) => {
            let mut state = checkpoint::load(path)?;
            // Only the epoch target may change; a longer target stretches the
            // remaining learning-rate schedule.
            let same_epochs = TrainConfig { epochs: state.config.epochs, ..cfg.train.clone() };
            if state.config != same_epochs || state.seed != cfg.seed {
                return Err(CliError::usage("checkpoint was written with a different train config or seed"));
            }
            if cfg.train.epochs < state.epochs_done {
                return Err(CliError::usage(format!(
                    "checkpoint already holds {} epochs, more than the requested {}",
                    state.epochs_done, cfg.train.epochs
                )));
            }
            state.config = cfg.train.clone();
            state
        }
        None => TrainState::new(cfg.train.clone(), cfg.seed)?,
    };
    // One epoch per call keeps a resumable checkpoint on disk throughout.
    let path = cfg.out.join("checkpoint.dgck");
    while state.epochs_done < cfg.train.epochs {
        let target = state.epochs_done + 1;
        run_training(&mut state, target, Some(&cfg.out))?;
        checkpoint::save(&state, &path)?;
    }
    // The log covers earlier sessions too when resuming into the same directory.
    let log = std::fs::read_to_string(cfg.out.join("epochs.jsonl"))?;
    let history = log
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
    Ok(train_records(&history))
}

fn train_records(history: &[EpochRecord]) -> Vec<MetricsRecord> {
    let mut out = Vec::new();
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        out.push(MetricsRecord::observed("train_loss_first_epoch", first.loss));
        out.push(MetricsRecord::observed("train_loss_final_epoch", last.loss));
        if let Some(ap) = last.ap_source {
            out.push(MetricsRecord::observed("ap50_source", ap));
        }
        for (domain, ap) in last.ap_per_domain.iter().flatten() {
            out.push(MetricsRecord::observed(format!("ap50_{domain}"), *ap));
        }
    }
    out
}

#[derive(Serialize)]
struct ApTable<'a> {
    checkpoint: String,
    classes: &'a [&'a str],
    rows: &'a [DomainRow],
}

/// Scores a checkpoint on every configured domain and writes the table as
/// JSON, aligned text and CSV.
pub fn eval(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    let path: PathBuf = checkpoint_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.eval.checkpoint.clone())
        .ok_or_else(|| CliError::usage("eval needs --checkpoint or eval.checkpoint"))?;
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", path.display())));
    }
    let state = checkpoint::load(&path)?;
    let model = state.model()?;
    let rows = evaluate_domains(&model, &state.params, &cfg.eval.domains, data_seed(cfg.seed, true), &cfg.eval.protocol)?;

    let table = ApTable { checkpoint: path.display().to_string(), classes: &CLASS_NAMES, rows: &rows };
    write_json(&cfg.out.join("ap_table.json"), &table)?;
    let text = ap_text(&rows);
    std::fs::write(cfg.out.join("ap_table.txt"), &text)?;
    std::fs::write(cfg.out.join("ap_table.csv"), ap_csv(&rows))?;
    print!("{text}");
    Ok(rows.iter().map(|r| MetricsRecord::observed(format!("ap50_{}", r.domain), r.mean)).collect())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// One row per domain, one column per class, then the mean, in AP x 100.
pub fn ap_text(rows: &[DomainRow]) -> String {
    let width = rows.iter().map(|r| r.domain.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}", "domain");
    for c in CLASS_NAMES {
        let _ = write!(s, " {c:>9}");
    }
    s.push_str("      mAP\n");
    for r in rows {
        let _ = write!(s, "{:<width$}", r.domain);
        for v in &r.per_class {
            let _ = write!(s, " {:>9}", cell(*v));
        }
        let _ = writeln!(s, " {:>8.1}", 100.0 * r.mean);
    }
    s
}

pub fn ap_csv(rows: &[DomainRow]) -> String {
    let mut s = format!("domain,{},mean\n", CLASS_NAMES.join(","));
    for r in rows {
        let classes: Vec<String> = r.per_class.iter().map(|v| v.map_or(String::new(), |v| format!("{v:.6}"))).collect();
        let _ = writeln!(s, "{},{},{:.6}", r.domain, classes.join(","), r.mean);
    }
    s
}

/// Trains every arm on the shared seeds and writes the grids.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    let a = &cfg.ablate;
    if a.seeds.is_empty() || a.arms.is_empty() {
        return Err(CliError::usage("ablate needs at least one seed and one arm"));
    }
    let runs_path = cfg.out.join("runs.jsonl");
    let mut log = String::new();
    let report = run_ablation(&a.train, &a.arms, &a.seeds, |r| {
        eprintln!("{:>10} seed {:<3} source {:.3}  loss {:.3} -> {:.3}", r.arm.name(), r.seed, r.ap_source, r.first_loss, r.final_loss);
        if let Ok(line) = serde_json::to_string(r) {
            log.push_str(&line);
            log.push('\n');
            let _ = std::fs::write(&runs_path, &log);
        }
    })?;
    write_json(&cfg.out.join("ablation.json"), &report)?;
    std::fs::write(cfg.out.join("table4.csv"), grid_csv(&report, &[Arm::Baseline, Arm::Wavenp, Arm::Daqs, Arm::Both]))?;
    std::fs::write(cfg.out.join("table5.csv"), grid_csv(&report, &[Arm::HighFreq, Arm::Both]))?;
    std::fs::write(cfg.out.join("table6.csv"), compatibility_csv(&report))?;
    let text = ablation_text(&report);
    std::fs::write(cfg.out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(ablation_records(&report))
}

fn row_label(arm: Arm, frequency_table: bool) -> &'static str {
    match (arm, frequency_table) {
        (Arm::Both, true) => "low-freq",
        (Arm::HighFreq, true) => "high-freq",
        (arm, _) => arm.name(),
    }
}

/// Median, mean and standard deviation per arm and domain.
pub fn grid_csv(report: &AblationReport, arms: &[Arm]) -> String {
    let frequency = arms.contains(&Arm::HighFreq);
    let mut s = String::from("arm,wavenp,daqs,domain,median,mean,std,n\n");
    for &arm in arms {
        let Some(row) = report.cells.get(&arm) else { continue };
        for d in std::iter::once(SOURCE_COLUMN.to_string()).chain(report.domains.iter().cloned()) {
            if let Some(c) = row.get(&d) {
                let _ = writeln!(
                    s,
                    "{},{},{},{d},{:.6},{:.6},{:.6},{}",
                    row_label(arm, frequency),
                    arm.wavenp(),
                    arm.daqs(),
                    c.median,
                    c.mean,
                    c.std,
                    c.n
                );
            }
        }
    }
    s
}

/// Gain from adding the query-selection head to each detector variant
/// (plain and with the wavelet augmentation), per domain in median AP.
pub fn compatibility_csv(report: &AblationReport) -> String {
    let mut s = String::from("detector,domain,without_daqs,with_daqs,gain\n");
    for (detector, without, with) in [("plain", Arm::Baseline, Arm::Daqs), ("wavenp", Arm::Wavenp, Arm::Both)] {
        let (Some(a), Some(b)) = (report.cells.get(&without), report.cells.get(&with)) else { continue };
        for d in std::iter::once(SOURCE_COLUMN.to_string()).chain(report.domains.iter().cloned()) {
            if let (Some(a), Some(b)) = (a.get(&d), b.get(&d)) {
                let _ = writeln!(s, "{detector},{d},{:.6},{:.6},{:.6}", a.median, b.median, b.median - a.median);
            }
        }
    }
    s
}

pub fn ablation_text(report: &AblationReport) -> String {
    let cols: Vec<String> = std::iter::once(SOURCE_COLUMN.to_string()).chain(report.domains.iter().cloned()).collect();
    let mut s = String::new();
    for (title, arms, freq) in [
        ("Components (median AP50 x 100 over seeds, +- std)", vec![Arm::Baseline, Arm::Wavenp, Arm::Daqs, Arm::Both], false),
        ("Perturbed band", vec![Arm::HighFreq, Arm::Both], true),
    ] {
        let _ = writeln!(s, "{title}");
        let _ = write!(s, "{:<10} {:>6} {:>5}", "arm", "wavenp", "daqs");
        for c in &cols {
            let _ = write!(s, " {c:>15}");
        }
        s.push('\n');
        for arm in arms {
            let Some(row) = report.cells.get(&arm) else { continue };
            let mark = |b: bool| if b { "x" } else { "" };
            let _ = write!(s, "{:<10} {:>6} {:>5}", row_label(arm, freq), mark(arm.wavenp()), mark(arm.daqs()));
            for c in &cols {
                let v = row[c];
                let _ = write!(s, " {:>15}", format!("{:.1} +-{:.1}", 100.0 * v.median, 100.0 * v.std));
            }
            s.push('\n');
        }
        s.push('\n');
    }
    for o in &report.orderings {
        let verdict = if o.passed { "holds" } else { "FAILS" };
        let _ = writeln!(s, "{verdict}: {} on {}/{} domains (need {})", o.claim, o.holds_on.len(), report.domains.len(), o.required);
    }
    s
}

fn ablation_records(report: &AblationReport) -> Vec<MetricsRecord> {
    let mut out = Vec::new();
    for (arm, row) in &report.cells {
        for (domain, c) in row {
            out.push(MetricsRecord::observed(format!("median_ap50_{}_{domain}", arm.name()), c.median));
        }
    }
    for o in &report.orderings {
        // Number of domains where the claim holds, against the required count.
        out.push(MetricsRecord::at_least(format!("ordering: {}", o.claim), o.holds_on.len() as f64, o.required as f64));
    }
    out
}
