//! Run configuration read from JSON. Unknown keys are rejected and the seed
//! has no default.

use std::path::{Path, PathBuf};

use exms_core::datagen::CountingConfig;
use exms_core::model::ModelConfig;
use exms_core::posttrain::LossConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::task::TaskFormat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Sft,
    Dpo,
    Grouper,
    Grpo,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::Dpo => "dpo",
            Objective::Grouper => "grouper",
            Objective::Grpo => "grpo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Training dataset (JSONL).
    pub train: PathBuf,
    /// Held-out dataset for accuracy reporting.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    /// Checkpoint the policy starts from; the frozen reference for DPO.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskFormat,
}

fn default_log_every() -> usize {
    1
}

fn default_rollout_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Directory receiving `checkpoint.exms` and `metrics.jsonl`.
    pub out_dir: PathBuf,
    /// Held-out accuracy is logged every this many steps and after the last.
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Adds wall-clock throughput to metrics, which makes them
    /// run-dependent.
    #[serde(default)]
    pub log_throughput: bool,
    /// Sampling temperature for on-policy GRPO rollouts.
    #[serde(default = "default_rollout_temperature")]
    pub rollout_temperature: f64,
    /// Rollout length cap for GRPO.
    #[serde(default)]
    pub rollout_max_tokens: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub objective: Objective,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub data: DataPaths,
    pub train: TrainParams,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        if let Some(p) = self.data.eval.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.reference.as_mut() {
            fix(p);
        }
        fix(&mut self.train.out_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 {
            return Err(CliError::Config("train.steps and train.batch_size must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(CliError::Config(format!("train.learning_rate {} must be positive", t.learning_rate)));
        }
        if t.log_every == 0 || t.eval_every == Some(0) {
            return Err(CliError::Config("train.log_every and train.eval_every must be positive".into()));
        }
        if !(t.rollout_temperature > 0.0 && t.rollout_temperature.is_finite()) {
            return Err(CliError::Config("train.rollout_temperature must be positive".into()));
        }
        if self.objective != Objective::Sft && self.data.reference.is_none() {
            return Err(CliError::Config(format!("objective {} requires data.reference", self.objective.name())));
        }
        Ok(())
    }
}

/// Configuration for `gen-data`: the counting sampler's settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub counting: CountingConfig,
}

impl GenDataConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "seed": 3,
            "objective": "sft",
            "model": ModelConfig::toy(),
            "data": {"train": "d/dataset.jsonl"},
            "train": {"steps": 2, "batch_size": 1, "learning_rate": 0.01, "out_dir": "out"}
        })
    }

    #[test]
    fn parses_and_resolves() {
        let mut cfg = RunConfig::from_json(&base().to_string()).unwrap();
        cfg.resolve_paths(Path::new("/x"));
        cfg.validate().unwrap();
        assert_eq!(cfg.data.train, PathBuf::from("/x/d/dataset.jsonl"));
        assert_eq!(cfg.loss, LossConfig::default());
    }

    #[test]
    fn seed_is_required_and_unknown_keys_rejected() {
        let mut v = base();
        v.as_object_mut().unwrap().remove("seed");
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(CliError::Config(_))));
        let mut v = base();
        v["train"]["stepz"] = 4.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(CliError::Config(_))));
    }

    #[test]
    fn preference_objectives_need_reference() {
        let mut v = base();
        v["objective"] = "dpo".into();
        let cfg = RunConfig::from_json(&v.to_string()).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
