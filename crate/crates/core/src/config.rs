//! Pipeline configuration, loaded from a single JSON document.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dpo::LossType;
use crate::retrieval::ModalityMask;

/// Ratio above which the sampler is no longer a small probe of the data.
pub const GAMMA_SOFT_LIMIT: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePaths {
    /// Sample JSONL.
    pub dataset: PathBuf,
    /// Directory holding `{q,t,v}.bin` and `{q,t,v}.ids`.
    pub embeddings: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    /// Rejection pools; the built-in pools are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pools: Option<PathBuf>,
    pub output: PathBuf,
}

/// How text is embedded for the contrastive rationale lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedderSpec {
    /// Built-in hashing embedder at the rationale gallery's dimension.
    Hash,
    /// External process speaking JSONL over stdio.
    Command(Vec<String>),
}

impl FromStr for EmbedderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "hash" {
            return Ok(EmbedderSpec::Hash);
        }
        match s.strip_prefix("cmd:") {
            Some(rest) => {
                let argv: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
                if argv.is_empty() {
                    Err("embedder command is empty".into())
                } else {
                    Ok(EmbedderSpec::Command(argv))
                }
            }
            None => Err(format!("unknown embedder {s:?} (expected \"hash\" or \"cmd:<argv>\")")),
        }
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedderSpec::Hash => f.write_str("hash"),
            EmbedderSpec::Command(argv) => write!(f, "cmd:{}", argv.join(" ")),
        }
    }
}

impl Serialize for EmbedderSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EmbedderSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_gamma() -> f64 {
    0.027
}
fn default_sigma() -> f64 {
    -0.3
}
fn default_top_k() -> usize {
    10
}
fn default_beta() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_block_size() -> usize {
    4096
}
fn default_embedder() -> EmbedderSpec {
    EmbedderSpec::Hash
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stratified sampling ratio.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Log-probability threshold separating low-confidence answers.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Neighbors retrieved per hard example.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub loss_type: LossType,
    #[serde(default = "default_epsilon")]
    pub robust_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    pub paths: PipelinePaths,
    #[serde(default)]
    pub modality_mask: ModalityMask,
    /// Corrupt closed (yes/no) answers by flipping them instead of going
    /// through the question type's pool.
    #[serde(default = "default_true")]
    pub closed_answer_flip: bool,
    /// Gallery rows scored per block during neighbor search.
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_embedder")]
    pub text_embedder: EmbedderSpec,
}

impl PipelineConfig {
    /// Config with default hyper-parameters rooted at the given paths.
    pub fn with_paths(paths: PipelinePaths) -> Self {
        PipelineConfig {
            gamma: default_gamma(),
            sigma: default_sigma(),
            top_k: default_top_k(),
            beta: default_beta(),
            loss_type: LossType::default(),
            robust_epsilon: default_epsilon(),
            seed: 0,
            paths,
            modality_mask: ModalityMask::default(),
            closed_answer_flip: true,
            block_size: default_block_size(),
            text_embedder: EmbedderSpec::Hash,
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: PipelineConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Rejects out-of-range values. A gamma above the soft limit only warns.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.gamma > GAMMA_SOFT_LIMIT {
            log::warn!(
                "gamma {} exceeds {GAMMA_SOFT_LIMIT}; the probe covers a large share of the data",
                self.gamma
            );
        }
        if !(self.sigma.is_finite() && self.sigma < 0.0) {
            return Err(ConfigError::Invalid(format!("sigma must be negative, got {}", self.sigma)));
        }
        if self.top_k == 0 {
            return Err(ConfigError::Invalid("top_k must be at least 1".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(ConfigError::Invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(0.0..0.5).contains(&self.robust_epsilon) {
            return Err(ConfigError::Invalid(format!(
                "robust_epsilon must be in [0, 0.5), got {}",
                self.robust_epsilon
            )));
        }
        if self.block_size == 0 {
            return Err(ConfigError::Invalid("block_size must be at least 1".into()));
        }
        if !self.modality_mask.any() {
            return Err(ConfigError::Invalid("modality_mask disables every modality".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"paths": {"dataset": "d.jsonl", "embeddings": "emb", "output": "out"}}"#
    }

    #[test]
    fn defaults_fill_in() {
        let c: PipelineConfig = serde_json::from_str(minimal()).unwrap();
        assert_eq!(c.gamma, 0.027);
        assert_eq!(c.sigma, -0.3);
        assert_eq!(c.top_k, 10);
        assert_eq!(c.beta, 0.1);
        assert_eq!(c.loss_type, LossType::Sigmoid);
        assert_eq!(c.text_embedder, EmbedderSpec::Hash);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"gama": 0.01, "paths": {"dataset": "d", "embeddings": "e", "output": "o"}}"#;
        assert!(serde_json::from_str::<PipelineConfig>(text).is_err());
        let text = r#"{"paths": {"dataset": "d", "embeddings": "e", "output": "o", "extra": 1}}"#;
        assert!(serde_json::from_str::<PipelineConfig>(text).is_err());
    }

    #[test]
    fn large_gamma_warns_but_passes() {
        let mut c: PipelineConfig = serde_json::from_str(minimal()).unwrap();
        c.gamma = 0.2;
        assert!(c.validate().is_ok());
        c.gamma = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn range_checks() {
        let base: PipelineConfig = serde_json::from_str(minimal()).unwrap();
        let mut c = base.clone();
        c.sigma = 0.1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.robust_epsilon = 0.5;
        assert!(c.validate().is_err());
        let mut c = base;
        c.top_k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedder_spec_parses() {
        assert_eq!("hash".parse::<EmbedderSpec>().unwrap(), EmbedderSpec::Hash);
        assert_eq!(
            "cmd:python embed.py --dim 8".parse::<EmbedderSpec>().unwrap(),
            EmbedderSpec::Command(vec!["python".into(), "embed.py".into(), "--dim".into(), "8".into()])
        );
        assert!("onnx".parse::<EmbedderSpec>().is_err());
    }
}
