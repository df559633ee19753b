//! Command-line front end: property suites, gradient checks, training,
//! evaluation, the ablation grid and report aggregation.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod report;
pub mod selftest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::error::{CliError, Result};
use crate::metrics::{print_records, write_json, write_metrics, MetricsRecord, Provenance};

#[derive(Debug, Parser)]
#[command(name = "dgdetr", version, about = "Wavelet style augmentation and style-orthogonal queries on a toy detector")]
pub struct Cli {
    /// JSON or TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<Precision>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Randomized property suites and golden values.
    Selftest {
        /// Perturb the wavelet analysis output; the suites must fail.
        #[arg(long)]
        corrupt_haar: bool,
        /// Cases per suite.
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck,
    /// Train the toy detector.
    Train {
        /// Continue from a checkpoint written with the same config and seed.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the source and shifted domains.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every ablation arm on paired seeds.
    Ablate,
    /// Aggregate the metrics files under a directory.
    Report {
        input: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Selftest { .. } => "selftest",
            Command::Gradcheck => "gradcheck",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

/// Defaults that most affect results, repeated at the top of the manifest.
#[derive(Serialize)]
struct KeyDefaults {
    sigma_np: f64,
    proj_alpha_train: f64,
    proj_alpha_infer: f64,
    k: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    argv: Vec<String>,
    key_defaults: KeyDefaults,
    config: &'a RunConfig,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dtype) = cli.dtype {
        cfg.dtype = dtype;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Command::Selftest { cases: Some(n), .. } = cli.command {
        cfg.selftest.cases = n;
    }
    for (section, train) in [("train", &cfg.train), ("ablate.train", &cfg.ablate.train)] {
        train.validate().map_err(|e| CliError::usage(format!("invalid {section} config: {e}")))?;
    }
    Ok(cfg)
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<()> {
    let model = &cfg.train.model;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        key_defaults: KeyDefaults {
            sigma_np: model.wavenp.sigma_np,
            proj_alpha_train: 1.0,
            proj_alpha_infer: model.proj_alpha_infer,
            k: model.k,
        },
        config: cfg,
    };
    write_json(&cfg.out.join("run_manifest.json"), &manifest)
}

fn require_f64(cfg: &RunConfig, command: &str) -> Result<()> {
    match cfg.dtype {
        Precision::F64 => Ok(()),
        Precision::F32 => Err(CliError::usage(format!("{command} runs in f64 only"))),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let command = cli.command.name();
    if let Command::Report { input } = &cli.command {
        let summary = report::collect(input)?;
        let out = cli.out.as_deref().unwrap_or(input);
        std::fs::create_dir_all(out)?;
        report::write(&summary, out)?;
        for w in &summary.warnings {
            eprintln!("warning: {w}");
        }
        print!("{}", report::markdown(&summary));
        return Ok(());
    }
    let cfg = resolve(cli)?;
    if !matches!(cli.command, Command::Selftest { .. }) {
        require_f64(&cfg, command)?;
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_manifest(&cfg, command)?;
    let records: Vec<MetricsRecord> = match &cli.command {
        Command::Selftest { corrupt_haar, .. } => selftest::run(&selftest::SelftestOptions {
            cases: cfg.selftest.cases,
            seed: cfg.seed,
            dtype: cfg.dtype,
            corrupt_haar: *corrupt_haar,
        })?,
        Command::Gradcheck => gradcheck::run(&cfg.gradcheck, cfg.seed)?,
        Command::Train { resume } => commands::train(&cfg, resume.as_deref())?,
        Command::Eval { checkpoint } => commands::eval(&cfg, checkpoint.as_deref())?,
        Command::Ablate => commands::ablate(&cfg)?,
        Command::Report { .. } => unreachable!("handled above"),
    };
    write_metrics(&cfg.out, &records)?;
    print_records(&records);
    // Experiment records describe outcomes, so only checks gate the exit code.
    let failed: Vec<&str> = records
        .iter()
        .filter(|r| !r.passed && r.provenance != Provenance::Experiment)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

