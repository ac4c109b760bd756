//! Declarative experiment configuration (TOML). Every key is required and
//! unknown keys are rejected, so a config file fully describes a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::InitScheme;
use crate::model::{ModelConfig, MultiplierMode, INPUT_DIM};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::runner::{BatchMode, SweepGrid, TrialConfig};

/// The shipped default, also written to `experiment.default` at the
/// repository root.
pub const DEFAULT_CONFIG: &str = include_str!("../../../experiment.default");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub trial: TrialSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub rank: usize,
    pub alpha: f64,
    pub multiplier: MultiplierMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSection {
    pub steps: usize,
    pub record_every: usize,
    /// `"full"` or `{ minibatch = N }`.
    pub batch: BatchMode,
}

/// Settings for a single `train` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub width: usize,
    pub scheme: InitScheme,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub widths: Vec<usize>,
    pub lrs: LrAxis,
    pub schemes: Vec<InitScheme>,
    /// Number of seed replicates per cell.
    pub seeds: u64,
    /// Batch mode override for the largest width only.
    pub largest_width_batch: BatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrAxis {
    List(Vec<f64>),
    LogSpaced { min: f64, max: f64, count: usize },
}

impl LrAxis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            LrAxis::List(v) => v.clone(),
            &LrAxis::LogSpaced { min, max, count } => crate::runner::SweepGrid::log_spaced(min, max, count),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn default_config() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("shipped default config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.trial_config(self.train.width, self.train.scheme, self.train.lr, self.seed)?;
        self.sweep_grid()?.validate()?;
        for &w in &self.sweep.widths {
            self.model_config(w).validate()?;
        }
        if let BatchMode::Minibatch(0) = self.sweep.largest_width_batch {
            return Err(Error::Config("sweep.largest_width_batch minibatch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, width: usize) -> ModelConfig {
        ModelConfig {
            d: INPUT_DIM,
            n: width,
            r: self.model.rank,
            alpha: self.model.alpha,
            multiplier_mode: self.model.multiplier,
        }
    }

    pub fn optimizer_config(&self, lr: f64) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig { kind: o.kind, lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay }
    }

    pub fn trial_config(&self, width: usize, scheme: InitScheme, lr: f64, seed: u64) -> Result<TrialConfig> {
        let cfg = TrialConfig {
            model: self.model_config(width),
            scheme,
            optimizer: self.optimizer_config(lr),
            steps: self.trial.steps,
            batch_mode: self.trial.batch,
            seed,
            record_every: self.trial.record_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Trial template for sweeps; width, scheme, lr and seed are filled in
    /// per cell.
    pub fn sweep_base(&self) -> Result<TrialConfig> {
        let widest = self.sweep.widths.iter().copied().max().unwrap_or(self.train.width);
        self.trial_config(widest, self.train.scheme, self.train.lr, self.seed)
    }

    pub fn sweep_grid(&self) -> Result<SweepGrid> {
        if self.sweep.seeds == 0 {
            return Err(Error::Config("sweep.seeds must be at least 1".into()));
        }
        let grid = SweepGrid {
            widths: self.sweep.widths.clone(),
            lrs: self.sweep.lrs.values(),
            schemes: self.sweep.schemes.clone(),
            seeds: (0..self.sweep.seeds).collect(),
        };
        grid.validate()?;
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parses_and_round_trips() {
        let cfg = ExperimentConfig::default_config();
        assert_eq!(cfg.trial.steps, 500);
        assert_eq!(cfg.trial.batch, BatchMode::Full);
        assert_eq!(cfg.sweep.widths, vec![128, 256, 512, 1024, 2048]);
        assert!(cfg.sweep_grid().unwrap().lrs.len() >= 8);
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    fn without_line(key: &str) -> String {
        DEFAULT_CONFIG.lines().filter(|l| !l.trim_start().starts_with(&format!("{key} ="))).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn every_missing_key_is_named() {
        for key in ["seed", "threads", "rank", "beta2", "record_every", "width", "schemes", "largest_width_batch"] {
            let text = without_line(key);
            assert_ne!(text, DEFAULT_CONFIG.trim_end(), "{key} not present in default");
            let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
            assert!(e.contains(&format!("missing field `{key}`")), "{key}: {e}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = DEFAULT_CONFIG.replace("[trial]", "[trial]\nwarmup = 3");
        let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(e.contains("unknown field `warmup`"), "{e}");
        let e = ExperimentConfig::parse(&format!("colour = 1\n{DEFAULT_CONFIG}")).unwrap_err().to_string();
        assert!(e.contains("colour"), "{e}");
    }

    #[test]
    fn invalid_values_rejected() {
        let text = DEFAULT_CONFIG.replace("record_every = 10", "record_every = 0");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = DEFAULT_CONFIG.replace("widths = [128, 256, 512, 1024, 2048]", "widths = [256, 128]");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn lr_axis_forms() {
        let list: LrAxis = toml::from_str::<toml::Table>("x = [0.1, 0.2]").unwrap()["x"].clone().try_into().unwrap();
        assert_eq!(list.values(), vec![0.1, 0.2]);
        let spaced: LrAxis =
            toml::from_str::<toml::Table>("x = { min = 0.25, max = 1.0, count = 3 }").unwrap()["x"].clone().try_into().unwrap();
        assert_eq!(spaced.values(), vec![0.25, 0.5, 1.0]);
    }
}
