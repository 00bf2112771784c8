//! Run configuration, the toy policy used for gradient checks, and the
//! reward-hacking simulation.

pub mod policy;
pub mod simulation;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::pipeline::DatasetConfig;
use crate::grpo::GrpoConfig;
use crate::reward::ScoringConfig;
use crate::scene_graph::PredicateVocabulary;
use policy::GradcheckConfig;
use simulation::{SimulationConfig, DEFAULT_SEED};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// TOML file with `base` and `extended` predicate lists.
    pub vocabulary: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a CLI run needs, one TOML section per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub reward: ScoringConfig,
    pub grpo: GrpoConfig,
    pub dataset: DatasetConfig,
    pub simulation: SimulationConfig,
    pub gradcheck: GradcheckConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            reward: ScoringConfig::default(),
            grpo: GrpoConfig::default(),
            dataset: DatasetConfig::default(),
            simulation: SimulationConfig::default(),
            gradcheck: GradcheckConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Reads and validates a config file, loading the predicate vocabulary
    /// it points to.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.load_vocabulary(path.parent())?;
        Ok(cfg)
    }

    pub fn load_vocabulary(&mut self, base_dir: Option<&Path>) -> Result<(), ConfigError> {
        let Some(rel) = &self.paths.vocabulary else {
            return Ok(());
        };
        let path = match base_dir {
            Some(d) if rel.is_relative() => d.join(rel),
            _ => rel.clone(),
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let vocab = PredicateVocabulary::from_toml_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.reward.vocabulary = Some(vocab);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, msg: String| ConfigError::Invalid(format!("[{section}] {msg}"));
        self.reward.weights.validate().map_err(|e| invalid("reward", e.to_string()))?;
        self.grpo.validate().map_err(|e| invalid("grpo", e.to_string()))?;
        self.dataset.validate().map_err(|e| invalid("dataset", e))?;
        self.simulation.validate().map_err(|e| invalid("simulation", e))?;
        self.gradcheck.validate().map_err(|e| invalid("gradcheck", e))?;
        if self.reward.strict_vocab && self.paths.vocabulary.is_none() {
            return Err(invalid("reward", "strict_vocab needs paths.vocabulary".into()));
        }
        Ok(())
    }
}
