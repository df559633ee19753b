//! Run configuration: a JSON or TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use dgdetr_toydetr::ablation::Arm;
use dgdetr_toydetr::evaluate::EvalConfig;
use dgdetr_toydetr::train::Schedule;
use dgdetr_toydetr::{DomainSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftestConfig {
    /// Random cases per property suite.
    pub cases: usize,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self { cases: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub operator_tolerance: f64,
    pub model_tolerance: f64,
    /// Parameters perturbed in the full-model check.
    pub model_slice: usize,
    pub model_scenes: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, operator_tolerance: 1e-5, model_tolerance: 1e-4, model_slice: 20, model_scenes: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCommandConfig {
    pub checkpoint: Option<PathBuf>,
    pub protocol: EvalConfig,
    /// Rows of the table; the first is conventionally the source domain.
    pub domains: Vec<DomainSpec>,
}

impl Default for EvalCommandConfig {
    fn default() -> Self {
        let mut domains = vec![DomainSpec::source()];
        domains.extend(DomainSpec::shifted_presets());
        Self { checkpoint: None, protocol: EvalConfig::default(), domains }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Shared by every arm, so runs are paired.
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub train: TrainConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        let mut train = TrainConfig { train_scenes: 150, epochs: 30, eval_every: 0, ..TrainConfig::default() };
        train.eval.scenes = 300;
        train.schedule = Schedule::Cosine;
        Self { seeds: (0..5).collect(), arms: Arm::ALL.to_vec(), train }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: Precision,
    pub out: PathBuf,
    pub selftest: SelftestConfig,
    pub gradcheck: GradcheckConfig,
    pub train: TrainConfig,
    pub eval: EvalCommandConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: Precision::F64,
            out: PathBuf::from("runs/latest"),
            selftest: SelftestConfig::default(),
            gradcheck: GradcheckConfig::default(),
            train: TrainConfig::default(),
            eval: EvalCommandConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML for `.toml` files and JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let parsed = if is_toml {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }
}
