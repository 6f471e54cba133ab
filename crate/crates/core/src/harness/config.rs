use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AblationVariant;
use crate::baselines::{RefinementConfig, TransitionOptions, GD_BUDGETS};
use crate::dynamics::{FamilyConfig, MotionFamily};
use crate::error::{Error, Result};
use crate::integrator::SolverConfig;
use crate::learn::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// A complete run description; written as `config.json` next to every
/// run's outputs and accepted back through `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub deterministic: bool,
    #[serde(flatten)]
    pub job: Job,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Generate(GenerateConfig),
    Train(TrainJob),
    Rollout(RolloutJob),
    Audit(AuditConfig),
    Ablate(AblateConfig),
    Report(ReportJob),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Generate(_) => "generate",
            Job::Train(_) => "train",
            Job::Rollout(_) => "rollout",
            Job::Audit(_) => "audit",
            Job::Ablate(_) => "ablate",
            Job::Report(_) => "report",
        }
    }
}

impl ExperimentConfig {
    pub fn new(job: Job, deterministic: bool) -> Self {
        Self { schema_version: CONFIG_SCHEMA_VERSION, deterministic, job }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Format { path: path.display().to_string(), detail: format!("unsupported config schema version {}", cfg.schema_version) });
        }
        Ok(cfg)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub families: Vec<MotionFamily>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub ranges: FamilyConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { families: MotionFamily::BENCHMARK.to_vec(), n_train: 100, n_val: 20, n_test: 50, seed: 0, ranges: FamilyConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub dataset: PathBuf,
    pub variant: AblationVariant,
    pub train: TrainConfig,
    #[serde(default)]
    pub transition: TransitionOptions,
    /// Continue from this checkpoint instead of initialising.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    /// Stop after this epoch (the schedule still spans `train.epochs`).
    #[serde(default)]
    pub stop_after: Option<usize>,
}

/// Simulator input for a rollout without a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub family: MotionFamily,
    pub params: BTreeMap<String, f64>,
    pub h: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutJob {
    pub checkpoint: PathBuf,
    /// Variational checkpoint scoring a neural rollout.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub index: usize,
    #[serde(default)]
    pub simulate: Option<SimSpec>,
    /// Defaults to the full length of the source sequence.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub families: Vec<MotionFamily>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub ranges: FamilyConfig,
    pub variational: TrainConfig,
    pub neural: TrainConfig,
    pub transition: TransitionOptions,
    pub refinement: RefinementConfig,
    pub solver: SolverConfig,
    /// Directory of pre-trained checkpoints; when absent the audit trains its own.
    pub checkpoints: Option<PathBuf>,
}

/// Training defaults of the desk-scale experiments.
pub fn experiment_train_config() -> TrainConfig {
    TrainConfig {
        ctx_dim: 8,
        width: 32,
        depth: 2,
        lr: 2e-3,
        grad_clip: Some(1.0),
        batch_size: 32,
        epochs: 120,
        windows_per_sequence: 4,
        horizon: 8,
        ..TrainConfig::default()
    }
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            families: MotionFamily::BENCHMARK.to_vec(),
            horizons: vec![64, 128, 200],
            seeds: (0..5).collect(),
            n_train: 64,
            n_val: 8,
            n_test: 50,
            ranges: FamilyConfig::default(),
            variational: experiment_train_config(),
            neural: experiment_train_config(),
            transition: TransitionOptions::default(),
            refinement: RefinementConfig::default(),
            solver: SolverConfig::default(),
            checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    /// Controlled-oscillator dataset; generated from `ranges` when absent.
    pub dataset: Option<PathBuf>,
    pub ranges: FamilyConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<AblationVariant>,
    pub horizon: usize,
    pub solver_sweep: Vec<usize>,
    pub gd_budgets: Vec<usize>,
    pub train: TrainConfig,
    pub neural: TrainConfig,
    pub transition: TransitionOptions,
    pub refinement: RefinementConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            ranges: FamilyConfig::default(),
            n_train: 128,
            n_val: 16,
            n_test: 50,
            data_seed: 0,
            seeds: (0..8).collect(),
            variants: AblationVariant::ALL.to_vec(),
            horizon: 128,
            solver_sweep: vec![1, 2, 4, 8],
            gd_budgets: GD_BUDGETS.to_vec(),
            train: experiment_train_config(),
            neural: experiment_train_config(),
            transition: TransitionOptions::default(),
            // largest step stable on the controlled validation split
            refinement: RefinementConfig { gd_step: 1.0, ..RefinementConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJob {
    pub dir: PathBuf,
}
