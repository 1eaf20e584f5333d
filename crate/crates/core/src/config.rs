//! Run configuration: one TOML document with `[data]`, `[labeler]`,
//! `[model]`, `[train]`, `[eval]`, `[simulate]` and `[sweep]` sections.
//! Command-line flags override individual keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::encoder::Dynamics;
use crate::ingest::{DatasetFormat, Featurizer, IngestError, SplitSpec, DEFAULT_FEATURE_DIM};
use crate::stance::{HttpProviderConfig, PromptTemplates, RetryPolicy};
use crate::synthetic::GeneratorConfig;
use crate::training::{RateInit, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub labeler: LabelerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub simulate: GeneratorConfig,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Hashing featurizer width, used when no embedding table is given.
    pub feature_dim: usize,
    /// `token<TAB>v1 v2 ... vh` lines.
    pub embeddings: Option<PathBuf>,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            format: DatasetFormat::Native,
            feature_dim: DEFAULT_FEATURE_DIM,
            embeddings: None,
            split: [0.6, 0.2, 0.2],
            split_seed: 0,
        }
    }
}

impl DataSection {
    pub fn featurizer(&self) -> Result<Featurizer, IngestError> {
        match &self.embeddings {
            Some(path) => Featurizer::load_embedding_table(path),
            None => Ok(Featurizer::Hashing {
                dim: self.feature_dim,
            }),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            ratios: (self.split[0], self.split[1], self.split[2]),
            seed: self.split_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mock" => Ok(Self::Mock),
            "http" => Ok(Self::Http),
            other => Err(format!("unknown provider '{other}' (expected mock or http)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerSection {
    pub provider: ProviderKind,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Environment variable holding the bearer token; empty for none.
    pub token_env: String,
    pub timeout_secs: u64,
    pub cache: Option<PathBuf>,
    pub concurrency: usize,
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    /// Per-dataset prompt overrides; `{source_sentence}` and
    /// `{response_sentence}` are substituted.
    pub prompt_root: Option<String>,
    pub prompt_reply: Option<String>,
    pub prompt_version: Option<String>,
}

impl Default for LabelerSection {
    fn default() -> Self {
        let http = HttpProviderConfig::default();
        let retry = RetryPolicy::default();
        Self {
            provider: ProviderKind::Mock,
            endpoint: http.endpoint,
            model: http.model,
            temperature: http.temperature,
            token_env: http.token_env.unwrap_or_default(),
            timeout_secs: http.timeout_secs,
            cache: None,
            concurrency: 4,
            max_attempts: retry.max_attempts,
            base_backoff_ms: retry.base_backoff_ms,
            prompt_root: None,
            prompt_reply: None,
            prompt_version: None,
        }
    }
}

impl LabelerSection {
    pub fn http_config(&self) -> HttpProviderConfig {
        HttpProviderConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            temperature: self.temperature,
            token_env: (!self.token_env.is_empty()).then(|| self.token_env.clone()),
            timeout_secs: self.timeout_secs,
        }
    }

    pub fn templates(&self) -> PromptTemplates {
        let mut t = PromptTemplates::default();
        let overridden = self.prompt_root.is_some() || self.prompt_reply.is_some();
        if let Some(root) = &self.prompt_root {
            t.root = root.clone();
        }
        if let Some(reply) = &self.prompt_reply {
            t.reply = reply.clone();
        }
        match &self.prompt_version {
            Some(v) => t.version = v.clone(),
            None if overridden => t.version = format!("{}+custom", t.version),
            None => {}
        }
        t
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts.max(1),
            base_backoff_ms: self.base_backoff_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub dynamics: Dynamics,
    pub use_encoder: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            backbone: b.kind,
            layers: b.layers,
            hidden: b.hidden,
            dropout: b.dropout,
            dynamics: Dynamics::Eusd,
            use_encoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub ce_weight: f64,
    pub alpha0: RateInit,
    pub beta0: RateInit,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            ce_weight: t.ce_weight,
            alpha0: t.alpha0,
            beta0: t.beta0,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            threads: t.threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub by_depth: bool,
    /// Independent training runs per configuration in sweeps.
    pub runs: usize,
    /// Split scored by `eval`: train, val, test or all.
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            by_depth: false,
            runs: 5,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Initial values tried for both rates together.
    pub rate_inits: Vec<RateInit>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            rate_inits: vec![
                RateInit::Fixed(0.0),
                RateInit::Fixed(0.5),
                RateInit::Fixed(1.0),
                RateInit::Random,
            ],
            lambdas: vec![0.0, 0.001, 0.01, 0.1, 0.5, 1.0],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            kind: self.model.backbone,
            layers: self.model.layers,
            hidden: self.model.hidden,
            dropout: self.model.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            backbone: self.backbone(),
            dynamics: self.model.dynamics,
            use_encoder: self.model.use_encoder,
            lambda: t.lambda,
            ce_weight: t.ce_weight,
            alpha0: t.alpha0,
            beta0: t.beta0,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            seed: self.seed,
            threads: t.threads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 9
            [model]
            backbone = "bigcn"
            dynamics = "usd"
            [train]
            lambda = 0.001
            alpha0 = "random"
            beta0 = 1.0
            [sweep]
            lambdas = [0.5]
            "#,
        )
        .unwrap();
        let t = cfg.train_config();
        assert_eq!(t.seed, 9);
        assert_eq!(t.backbone.kind, BackboneKind::Bigcn);
        assert_eq!(t.dynamics, Dynamics::Usd);
        assert_eq!((t.alpha0, t.beta0), (RateInit::Random, RateInit::Fixed(1.0)));
        assert_eq!(t.lr, 5e-4);
        assert_eq!(cfg.sweep.lambdas, vec![0.5]);
        assert_eq!(cfg.sweep.rate_inits.len(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlamda = 1.0\n").is_err());
    }

    #[test]
    fn prompt_overrides_change_the_version() {
        let mut l = LabelerSection::default();
        assert_eq!(l.templates(), PromptTemplates::default());
        l.prompt_reply = Some("{source_sentence} / {response_sentence}".into());
        assert_ne!(l.templates().version, PromptTemplates::default().version);
    }
}
