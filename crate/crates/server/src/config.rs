//! Service configuration: a TOML file plus `PROTOREC__<SECTION>__<KEY>`
//! environment overrides.

use protorec_core::ann::{ForestParams, SearchBudget};
use protorec_core::features::{DEFAULT_BINS_PER_CHANNEL, DEFAULT_SIGMA_FRACTION};
use protorec_core::metadata::DEFAULT_RHO;
use protorec_core::recognition::{
    ConfidenceThresholds, EngineConfig, DEFAULT_K, DEFAULT_LAMBDA, DEFAULT_THETA, DEFAULT_TOKEN_TTL_MS,
};
use protorec_core::vector::Metric;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ENV_PREFIX: &str = "PROTOREC__";
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 8 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub server: ServerSection,
    pub store: StoreSection,
    pub recognition: RecognitionSection,
    pub index: IndexSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    /// Bearer token for admin endpoints; admin endpoints are closed without it.
    pub admin_token: Option<String>,
    pub max_image_bytes: usize,
    pub messages: Option<PathBuf>,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            admin_token: None,
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
            messages: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    /// Clients send precomputed vectors.
    Embedding,
    /// Clients send raw images; the server computes YCbCr histograms.
    ColorHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    pub descriptor: DescriptorKind,
    pub dim: usize,
    pub metric: Metric,
    pub l2_normalize: bool,
    pub histogram_bins: usize,
    pub sigma_fraction: f64,
    /// Holds `mirlog.v1`, index snapshots and exports. In-memory when unset.
    pub data_dir: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    /// Export directory loaded into an empty store at startup.
    pub seed_dataset: Option<PathBuf>,
    pub pca_model: Option<PathBuf>,
    pub log_limit_bytes: Option<u64>,
}

impl Default for StoreSection {
    fn default() -> Self {
        Self {
            descriptor: DescriptorKind::Embedding,
            dim: 512,
            metric: Metric::Euclidean,
            l2_normalize: true,
            histogram_bins: DEFAULT_BINS_PER_CHANNEL,
            sigma_fraction: DEFAULT_SIGMA_FRACTION,
            data_dir: None,
            taxonomy: None,
            seed_dataset: None,
            pca_model: None,
            log_limit_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognitionSection {
    pub k: usize,
    pub lambda: f64,
    pub theta: f64,
    pub rho: f64,
    pub token_ttl_secs: u64,
    /// Rerank by feature code unless the query says otherwise.
    pub rerank: bool,
}

impl Default for RecognitionSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            lambda: DEFAULT_LAMBDA,
            theta: DEFAULT_THETA,
            rho: DEFAULT_RHO,
            token_ttl_secs: (DEFAULT_TOKEN_TTL_MS / 1000) as u64,
            rerank: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub n_trees: usize,
    pub leaf_capacity: Option<usize>,
    pub search_budget: SearchBudget,
    pub seed: u64,
}

impl Default for IndexSection {
    fn default() -> Self {
        let f = ForestParams::default();
        Self {
            n_trees: f.n_trees,
            leaf_capacity: f.leaf_capacity,
            search_budget: SearchBudget::default(),
            seed: f.seed,
        }
    }
}

impl ServiceConfig {
    /// Reads `path` (defaults when `None`) and applies process env overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn from_toml_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text)?;
        for (key, value) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            if path.len() != 2 || path.iter().any(String::is_empty) {
                return Err(ConfigError::Invalid(format!("`{key}` should look like {ENV_PREFIX}SECTION__KEY")));
            }
            let section = table
                .entry(path[0].clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ConfigError::Invalid(format!("`{}` is not a section", path[0])))?;
            section.insert(path[1].clone(), env_value(&value));
        }
        let cfg: ServiceConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        ConfidenceThresholds::new(self.recognition.lambda, self.recognition.theta).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.recognition.k == 0 {
            return bad("recognition.k must be positive".into());
        }
        if self.recognition.rho < 0.0 {
            return bad("recognition.rho must be nonnegative".into());
        }
        if self.store.descriptor == DescriptorKind::ColorHistogram {
            let b = self.store.histogram_bins;
            if self.store.metric != Metric::JensenShannon || self.store.dim != b * b * b || self.store.l2_normalize {
                return bad(format!(
                    "color histogram stores need metric jensen-shannon, dim {} and l2_normalize = false",
                    b * b * b
                ));
            }
        }
        if self.store.dim == 0 {
            return bad("store.dim must be positive".into());
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        let mut e = EngineConfig::new(self.store.dim, self.store.metric);
        e.l2_normalize = self.store.l2_normalize;
        e.k = self.recognition.k;
        e.thresholds = ConfidenceThresholds {
            lambda: self.recognition.lambda,
            theta: self.recognition.theta,
        };
        e.rho = self.recognition.rho;
        e.forest = ForestParams {
            n_trees: self.index.n_trees,
            leaf_capacity: self.index.leaf_capacity,
            seed: self.index.seed,
        };
        e.budget = self.index.search_budget;
        e.token_ttl_ms = self.recognition.token_ttl_secs.saturating_mul(1000).min(i64::MAX as u64) as i64;
        e
    }
}

/// Env values are read as TOML scalars when they parse, else as strings.
fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ServiceConfig::from_toml_with_env("", []).unwrap();
        assert_eq!(c, ServiceConfig::default());
        assert_eq!(c.engine_config().k, 10);
    }

    #[test]
    fn file_values_and_env_overrides() {
        let text = r#"
            [server]
            admin_token = "secret"
            [recognition]
            lambda = 0.2
            [index]
            search_budget = "inf"
        "#;
        let env = [
            ("PROTOREC__RECOGNITION__THETA".to_string(), "0.9".to_string()),
            ("PROTOREC__SERVER__BIND".to_string(), "0.0.0.0:9000".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = ServiceConfig::from_toml_with_env(text, env).unwrap();
        assert_eq!(c.server.admin_token.as_deref(), Some("secret"));
        assert_eq!(c.recognition.lambda, 0.2);
        assert_eq!(c.recognition.theta, 0.9);
        assert_eq!(c.server.bind, "0.0.0.0:9000");
        assert_eq!(c.index.search_budget, SearchBudget::Unbounded);
    }

    #[test]
    fn invalid_configs() {
        assert!(ServiceConfig::from_toml_with_env("[recognition]\nlambda = 2.0", []).is_err());
        assert!(ServiceConfig::from_toml_with_env("[bogus]\nx = 1", []).is_err());
        assert!(ServiceConfig::from_toml_with_env("[store]\ndescriptor = \"color_histogram\"", []).is_err());
        let ok = "[store]\ndescriptor = \"color_histogram\"\ndim = 64\nmetric = \"jensen-shannon\"\nl2_normalize = false";
        assert!(ServiceConfig::from_toml_with_env(ok, []).is_ok());
        assert!(ServiceConfig::from_toml_with_env("", [("PROTOREC__K".into(), "3".into())]).is_err());
    }
}
