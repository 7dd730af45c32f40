//! Multi-arm, multi-seed experiment plans: validation, execution into an
//! artifact tree, and comparison of finished runs.

mod compare;
mod run;

pub use compare::{compare, ArmStats, ComparisonTable, Stat, COMPARED_METRICS};
pub use run::{run, run_cell, CellStatus, CellSummary, CellTiming, Manifest, ManifestEntry, MetricsRow, RunOptions};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, GritConfig, ValidatedConfig};
use crate::eval::EvalError;
use crate::format::FormatError;
use crate::rng::combine;
use crate::toymodel::{CorpusSpec, ToyError, TrainSettings};

/// Environment variable that replaces the plan's master seed.
pub const SEED_ENV: &str = "GRIT_SEED";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("arm {arm}: {source}")]
    Config { arm: String, source: ConfigError },
    #[error("schema mismatch in {path}: missing column {column}")]
    SchemaMismatch { path: PathBuf, column: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{failed} of {total} cells failed")]
    CellsFailed { failed: usize, total: usize },
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    /// Problems with the inputs, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ExperimentError::InvalidPlan(_)
                | ExperimentError::Config { .. }
                | ExperimentError::SchemaMismatch { .. }
                | ExperimentError::Json(_)
        )
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    /// Keys of the scheduler config to replace for this arm.
    #[serde(default)]
    pub config: Map<String, Value>,
    /// Keys of the training settings to replace for this arm.
    #[serde(default)]
    pub train: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpFlags {
    #[serde(default)]
    pub schedules: bool,
    #[serde(default)]
    pub corpus: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub base: GritConfig,
    /// The corpus seed is replaced per cell.
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub train: TrainSettings,
    pub arms: Vec<ArmSpec>,
    pub epochs: u32,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dump: DumpFlags,
    /// Schedule file used for epoch 0 of every cell.
    #[serde(default)]
    pub initial_schedule: Option<PathBuf>,
    /// Evaluation mask probabilities for the final usage-of-vision report.
    #[serde(default)]
    pub uov_grid: Vec<f64>,
}

/// An arm with its overrides applied and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedArm {
    pub name: String,
    pub config: ValidatedConfig,
    pub train: TrainSettings,
    pub config_hash: String,
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, over: &Map<String, Value>) -> Result<T, serde_json::Error> {
    let mut v = serde_json::to_value(base)?;
    if let Value::Object(m) = &mut v {
        for (k, x) in over {
            m.insert(k.clone(), x.clone());
        }
    }
    serde_json::from_value(v)
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `GRIT_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<(), ExperimentError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.base.master_seed = v
                .trim()
                .parse()
                .map_err(|_| ExperimentError::InvalidPlan(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    /// Master seed of the `(arm, seed)` cell; shared by all arms so that
    /// arms see the same corpus and initial weights.
    pub fn cell_seed(&self, seed: u64) -> u64 {
        combine(self.base.master_seed, seed)
    }

    pub fn resolve(&self) -> Result<Vec<ResolvedArm>, ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidPlan(m));
        if self.arms.is_empty() {
            return bad("no arms".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("duplicate seeds".into());
        }
        if let Some(p) = self.uov_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("uov grid value {p} outside [0, 1]"));
        }
        if !self.uov_grid.is_empty() && self.corpus.eval_size == 0 {
            return bad("uov grid needs a corpus with eval_size > 0".into());
        }
        let mut names = HashSet::new();
        let mut out = Vec::with_capacity(self.arms.len());
        for arm in &self.arms {
            if !valid_name(&arm.name) {
                return bad(format!("arm name {:?} must be non-empty [A-Za-z0-9._-]", arm.name));
            }
            if !names.insert(arm.name.as_str()) {
                return bad(format!("duplicate arm name {:?}", arm.name));
            }
            let cfg: GritConfig = overlay(&self.base, &arm.config)
                .map_err(|e| ExperimentError::InvalidPlan(format!("arm {}: config: {e}", arm.name)))?;
            let train: TrainSettings = overlay(&self.train, &arm.train)
                .map_err(|e| ExperimentError::InvalidPlan(format!("arm {}: train: {e}", arm.name)))?;
            let config = cfg.clone()
                .validate()
                .map_err(|source| ExperimentError::Config { arm: arm.name.clone(), source })?;
            if config.dataset_size != self.corpus.dataset_size {
                return bad(format!(
                    "arm {}: dataset_size {} differs from corpus dataset_size {}",
                    arm.name, config.dataset_size, self.corpus.dataset_size
                ));
            }
            if !(train.learning_rate >= 0.0 && train.learning_rate.is_finite()) {
                return bad(format!("arm {}: learning_rate must be finite and >= 0", arm.name));
            }
            if train.hidden == 0 || train.fusion_hidden == 0 {
                return bad(format!("arm {}: hidden sizes must be positive", arm.name));
            }
            if train.probe.is_some_and(|p| p.every == 0 || p.slice < 2 || p.slice > self.corpus.eval_size) {
                return bad(format!("arm {}: probe needs every >= 1 and 2 <= slice <= eval_size", arm.name));
            }
            let config_hash = config_hash(&cfg, &train, &self.corpus);
            out.push(ResolvedArm { name: arm.name.clone(), config, train, config_hash });
        }
        Ok(out)
    }
}

/// First 16 hex digits of the SHA-256 of the arm's effective settings.
pub fn config_hash(cfg: &GritConfig, train: &TrainSettings, corpus: &CorpusSpec) -> String {
    let doc = serde_json::json!({ "config": cfg, "train": train, "corpus": corpus });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(digest)[..16].to_string()
}
