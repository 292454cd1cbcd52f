//! Sectioned TOML run configuration. Every section and key is optional and
//! falls back to its default; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{ClickTraining, FormulaParams};
use crate::dataset::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numcore::AdamConfig;
use crate::pareto::ParetoConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file; relative paths resolve against the output directory.
    pub path: PathBuf,
    pub tasks: Vec<String>,
    /// Train, validation and test fractions of the sessions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data.jsonl"),
            tasks: ["click", "like", "follow", "comment", "forward", "long_view"]
                .map(String::from)
                .to_vec(),
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub single_sort: bool,
    pub lr: bool,
    pub mlp: bool,
    /// Logistic regression over the trained model's transformed scores.
    pub lr_umnn: bool,
    pub training: ClickTraining,
    pub adam: AdamConfig,
    pub additive: Option<FormulaParams>,
    pub multiplicative: Option<FormulaParams>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            single_sort: true,
            lr: true,
            mlp: true,
            lr_umnn: true,
            training: ClickTraining::default(),
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            additive: None,
            multiplicative: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpConfig {
    /// Number of test-split records whose contexts are sampled.
    pub contexts: usize,
    pub points: usize,
}

impl Default for DumpConfig {
    fn default() -> Self {
        Self {
            contexts: 4,
            points: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; generation, initialisation, shuffling and splitting
    /// derive their streams from it.
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pareto: ParetoConfig,
    pub eval: EvalConfig,
    pub baselines: BaselineConfig,
    pub dump: DumpConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialise")
    }

    /// Replace the master seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn tasks(&self) -> usize {
        self.data.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.tasks();
        if m == 0 {
            return Err(Error::Config("data.tasks must name at least one task".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.pareto.validate(m)?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        if self.dump.points < 2 {
            return Err(Error::Config("dump.points must be at least 2".into()));
        }
        if self.baselines.training.label_task >= m {
            return Err(Error::Config(format!(
                "baselines.training.label_task {} out of range for {m} tasks",
                self.baselines.training.label_task
            )));
        }
        let total: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data.split {:?} must be non-negative and sum to 1",
                self.data.split
            )));
        }
        Ok(())
    }

    /// Additional checks for generating data from `[synth]`.
    pub fn validate_synth(&self) -> Result<()> {
        self.synth.validate()?;
        if self.synth.rates.len() != self.tasks() {
            return Err(Error::Config(format!(
                "synth.rates has {} entries for {} tasks",
                self.synth.rates.len(),
                self.tasks()
            )));
        }
        Ok(())
    }

    /// Dataset location: an explicit override, else `data.path` under `out`.
    pub fn data_path(&self, out: &Path, explicit: Option<&Path>) -> PathBuf {
        match explicit {
            Some(p) => p.to_path_buf(),
            None if self.data.path.is_absolute() => self.data.path.clone(),
            None => out.join(&self.data.path),
        }
    }

    /// Independent seeds for the stages of a run.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage as u64)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Split = 1,
    Init = 2,
    Shuffle = 3,
    Baselines = 4,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped(name: &str) -> Config {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        Config::load(&path).unwrap()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg, Config::default());
        cfg.validate().unwrap();
        cfg.validate_synth().unwrap();
    }

    #[test]
    fn shipped_default_matches_built_in_defaults() {
        assert_eq!(shipped("default.toml"), Config::default());
    }

    #[test]
    fn shipped_desk_profile_is_valid() {
        let cfg = shipped("desk.toml");
        cfg.validate().unwrap();
        cfg.validate_synth().unwrap();
    }

    #[test]
    fn seed_propagates() {
        let cfg = Config::from_toml("seed = 7").unwrap();
        assert_eq!(cfg.synth.seed, 7);
        assert_eq!(cfg.with_seed(9).synth.seed, 9);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(Config::from_toml("[model]\nbogus = 1"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("seed = \"x\""), Err(Error::Config(_))));
        let cfg = Config::from_toml("[model]\nquadrature_nodes = 4").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = Config::from_toml("[data]\ntasks = [\"a\", \"b\"]").unwrap();
        assert!(matches!(cfg.validate_synth(), Err(Error::Config(_))));
        let cfg = Config::from_toml("[data]\nsplit = [0.5, 0.1, 0.1]").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = shipped("desk.toml");
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn data_path_resolution() {
        let cfg = Config::default();
        let out = Path::new("/tmp/run");
        assert_eq!(cfg.data_path(out, None), out.join("data.jsonl"));
        assert_eq!(cfg.data_path(out, Some(Path::new("x.jsonl"))), Path::new("x.jsonl"));
    }
}
