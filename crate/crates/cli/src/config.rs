use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kseg::evaluation::EvalConfig;
use kseg::io::{config_hash, Stamp};
use kseg::models::{ModelConfig, ModelVariant};
use kseg::phantom::PhantomSpec;
use kseg::training::TrainConfig;
use kseg::{Error, Result};

/// Everything an experiment depends on. Its serialized form is hashed
/// into every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub cohort_size: usize,
    pub output_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub models: Vec<ModelConfig>,
}

impl ExperimentConfig {
    pub fn full() -> Self {
        Self {
            seed: 2024,
            cohort_size: 50,
            output_dir: PathBuf::from("kseg-out"),
            phantom: PhantomSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            models: ModelVariant::ALL.iter().map(|&v| ModelConfig::full(v)).collect(),
        }
    }

    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            models: ModelVariant::ALL.iter().map(|&v| ModelConfig::desk(v)).collect(),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.cohort_size < self.eval.folds {
            return Err(Error::Validation(format!(
                "cohort_size {} is smaller than the {} folds",
                self.cohort_size, self.eval.folds
            )));
        }
        for v in ModelVariant::ALL {
            let n = self.models.iter().filter(|m| m.variant == v).count();
            if n != 1 {
                return Err(Error::Validation(format!("expected exactly one [[models]] entry for {v}, found {n}")));
            }
        }
        for m in &self.models {
            m.validate()?;
            let div = m.divisor();
            if !self.train.patch_depth.is_multiple_of(div[0]) || !self.eval.patch_depth.is_multiple_of(div[0]) {
                return Err(Error::Validation(format!(
                    "{}: patch depth must be a multiple of {}",
                    m.variant, div[0]
                )));
            }
            if !self.phantom.height.is_multiple_of(div[1]) || !self.phantom.width.is_multiple_of(div[2]) {
                return Err(Error::Validation(format!(
                    "{}: phantom in-plane size must be a multiple of {}x{}",
                    m.variant, div[1], div[2]
                )));
            }
        }
        Ok(())
    }

    pub fn model(&self, v: ModelVariant) -> &ModelConfig {
        self.models.iter().find(|m| m.variant == v).expect("validated config has every variant")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("serializing config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical serialization, so formatting and comments in
    /// the file do not matter.
    pub fn stamp(&self) -> Result<Stamp> {
        Ok(Stamp::new(config_hash(&self.to_toml()?)))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join("dataset")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output_dir.join("results")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for cfg in [ExperimentConfig::full(), ExperimentConfig::desk()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn missing_variant_is_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.models.pop();
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn hash_ignores_formatting() {
        let cfg = ExperimentConfig::desk();
        let text = format!("# comment\n{}", cfg.to_toml().unwrap());
        let again = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.stamp().unwrap(), again.stamp().unwrap());
    }
}
