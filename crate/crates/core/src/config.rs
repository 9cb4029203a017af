//! The single TOML config file shared by every subcommand.
//!
//! Sections: `[endpoint.<name>]`, `[labels]`, `[pipeline]`, `[reward]`,
//! `[nft]`, `[gcr]` and `[paths]`. Every section is optional and falls back to
//! its defaults; endpoints are only checked when a command needs them.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::gateway::EndpointConfig;
use crate::gcr::GcrConfig;
use crate::nft::NftConfig;
use crate::pipeline::PipelineConfig;
use crate::prompts::LabelVocabulary;
use crate::reward::{AspectWeights, NormalizeOptions, QualityThresholds, RewardOptions, DEFAULT_SELECTION_THRESHOLD};

pub const ENV_PREFIX: &str = "PARROT_ENDPOINT_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

impl ConfigError {
    /// Dotted path of the offending field, when there is one.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            ConfigError::Field { path, .. } => Some(path),
            _ => None,
        }
    }

    fn field(path: impl Into<String>, message: impl ToString) -> Self {
        ConfigError::Field {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub weights: AspectWeights,
    pub normalize: NormalizeOptions,
    pub quality: QualityThresholds,
    /// Prompts whose mean score is strictly below this are kept for training.
    pub selection_threshold: f64,
}

impl RewardSection {
    pub fn options(&self) -> RewardOptions {
        RewardOptions {
            weights: self.weights,
            normalize: self.normalize,
            quality: self.quality,
        }
    }
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            weights: AspectWeights::default(),
            normalize: NormalizeOptions::default(),
            quality: QualityThresholds::default(),
            selection_threshold: DEFAULT_SELECTION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Default directory for command outputs when no flag names one.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub endpoint: BTreeMap<String, EndpointConfig>,
    pub labels: LabelVocabulary,
    pub pipeline: PipelineConfig,
    pub reward: RewardSection,
    pub nft: NftConfig,
    pub gcr: GcrConfig,
    pub paths: PathsConfig,
}

impl AppConfig {
    /// Parses and validates; does not consult the environment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: AppConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies `PARROT_ENDPOINT_<NAME>_*` overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    /// `PARROT_ENDPOINT_TEACHER_API_KEY` sets `endpoint.teacher.api_key`, and
    /// likewise `_BASE_URL`. Only endpoints already present are touched.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (name, ep) in self.endpoint.iter_mut() {
            let stem = format!("{ENV_PREFIX}{}", env_name(name));
            if let Some(key) = lookup(&format!("{stem}_API_KEY")) {
                ep.api_key = Some(key);
            }
            if let Some(url) = lookup(&format!("{stem}_BASE_URL")) {
                ep.base_url = url;
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, ep) in &self.endpoint {
            ep.validate().map_err(|e| ConfigError::field(format!("endpoint.{name}"), e))?;
        }
        self.pipeline.validate().map_err(|e| ConfigError::field("pipeline", e))?;
        let r = &self.reward;
        r.weights.validate().map_err(|e| ConfigError::field("reward.weights", e))?;
        if !(r.normalize.epsilon.is_finite() && r.normalize.epsilon > 0.0) {
            return Err(ConfigError::field("reward.normalize.epsilon", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&r.quality.mean_max) {
            return Err(ConfigError::field("reward.quality.mean_max", "must be in [0, 1]"));
        }
        if !(0.0..=0.5).contains(&r.quality.std_min) {
            return Err(ConfigError::field("reward.quality.std_min", "must be in [0, 0.5]"));
        }
        if !(1.0..=4.0).contains(&r.selection_threshold) {
            return Err(ConfigError::field("reward.selection_threshold", "must be in [1, 4]"));
        }
        self.nft.validate().map_err(|e| ConfigError::field("nft", e))?;
        self.gcr.validate().map_err(|e| ConfigError::field("gcr.threshold", e))?;
        Ok(())
    }

    /// Looks up the endpoint a command refers to by `role` (for example
    /// `pipeline.teacher`), naming `endpoint.<name>` when it is absent.
    pub fn endpoint(&self, name: &str) -> Result<&EndpointConfig, ConfigError> {
        self.endpoint
            .get(name)
            .ok_or_else(|| ConfigError::field(format!("endpoint.{name}"), "section is missing"))
    }

    pub fn teacher(&self) -> Result<&EndpointConfig, ConfigError> {
        self.endpoint(&self.pipeline.teacher)
    }

    pub fn judge(&self) -> Result<&EndpointConfig, ConfigError> {
        self.endpoint(&self.gcr.judge)
    }

    pub fn generator(&self) -> Result<&EndpointConfig, ConfigError> {
        self.endpoint(&self.gcr.generator)
    }
}

fn env_name(endpoint: &str) -> String {
    endpoint
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = include_str!("../../../config/parrot.example.toml");

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(AppConfig::parse("").unwrap(), AppConfig::default());
    }

    #[test]
    fn example_config_spells_out_the_defaults() {
        let cfg = AppConfig::parse(EXAMPLE).unwrap();
        let mut stripped = cfg.clone();
        stripped.endpoint.clear();
        assert_eq!(stripped, AppConfig::default());
        assert_eq!(
            cfg.endpoint.keys().map(String::as_str).collect::<Vec<_>>(),
            ["generator", "judge", "teacher"]
        );
        assert_eq!(cfg.nft.group_size, 16);
        assert_eq!(cfg.nft.beta, 1e-4);
        assert_eq!(cfg.nft.noise_level, 0.7);
        assert_eq!(cfg.nft.sampling_steps, 15);
        assert_eq!(cfg.reward.quality.mean_max, 0.9);
        assert_eq!(cfg.reward.quality.std_min, 0.05);
        assert_eq!(cfg.reward.selection_threshold, 3.0);
    }

    #[test]
    fn missing_endpoint_names_its_path() {
        let err = AppConfig::parse("").unwrap().teacher().unwrap_err();
        assert_eq!(err.field_path(), Some("endpoint.teacher"));
        assert!(err.to_string().contains("endpoint.teacher"));
    }

    #[test]
    fn bad_fields_name_their_path() {
        let cases = [
            ("[endpoint.judge]\nbase_url = \"\"\nmodel = \"m\"\n", "endpoint.judge"),
            ("[gcr]\nthreshold = 4.5\n", "gcr.threshold"),
            ("[reward.quality]\nmean_max = 1.5\n", "reward.quality.mean_max"),
            ("[reward]\nweights = [1.0, 0.0, 1.0, 1.0]\n", "reward.weights"),
            ("[nft]\ngroup_size = 1\n", "nft"),
        ];
        for (text, path) in cases {
            let err = AppConfig::parse(text).unwrap_err();
            assert_eq!(err.field_path(), Some(path), "{text}");
        }
        assert!(matches!(AppConfig::parse("[nft]\nbogus = 1\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(AppConfig::parse("[[["), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn environment_overrides_secrets_and_urls() {
        let mut cfg = AppConfig::parse(
            "[endpoint.teacher]\nbase_url = \"http://a\"\nmodel = \"m\"\n[endpoint.my-judge]\nbase_url = \"http://b\"\nmodel = \"m\"\n",
        )
        .unwrap();
        cfg.apply_env(|k| match k {
            "PARROT_ENDPOINT_TEACHER_API_KEY" => Some("sk-1".into()),
            "PARROT_ENDPOINT_MY_JUDGE_BASE_URL" => Some("http://c".into()),
            _ => None,
        });
        assert_eq!(cfg.endpoint["teacher"].api_key.as_deref(), Some("sk-1"));
        assert_eq!(cfg.endpoint["teacher"].base_url, "http://a");
        assert_eq!(cfg.endpoint["my-judge"].base_url, "http://c");
        assert_eq!(cfg.endpoint["my-judge"].api_key, None);
    }
}
