//! Flat `key = value` run configuration.
//!
//! Precedence is defaults, then the config file, then flags. Environment
//! variables only supply the API key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Thresholds;
use crate::executor::{DescriptionMode, ExecutorConfig};
use crate::model::{BackendConfig, EmbedConfig, RetryPolicy};
use crate::retrieval::RetrieveOptions;

pub const API_KEY_ENV: &str = "MODEL_API_KEY";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: `{key}` set twice")]
    Duplicate { line: usize, key: String },
    #[error("`{key}` = {value:?}: {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("{0}")]
    Missing(String),
}

const DEFAULTS: &[(&str, &str)] = &[
    ("action_threshold", "0.9015"),
    ("apps", ""),
    ("chat_endpoint", ""),
    ("chat_model", ""),
    ("description_mode", "model"),
    ("embed_dim", "64"),
    ("embed_endpoint", ""),
    ("embed_model", ""),
    ("embedder", "hash"),
    ("exclude_self", "true"),
    ("k", "1"),
    ("kshots", "1,2,3"),
    ("max_output_tokens", "2048"),
    ("max_retries", "3"),
    ("max_steps", "40"),
    ("min_avg_sim", "0.6"),
    ("mock", "none"),
    ("same_app_only", "false"),
    ("split", "split"),
    ("tau_s", "0"),
    ("timeout_secs", "120"),
    ("ui_threshold", "0.9447"),
    ("workers", "1"),
];

/// Raw key/value pairs over the defaults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            config.set(key, value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Overrides one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !self.values.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockMode {
    None,
    Echo,
    Scripted(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    Hash,
    Http,
}

/// Typed, validated view of a [`Config`].
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub chat_endpoint: String,
    pub chat_model: String,
    pub embedder: EmbedderKind,
    pub embed_endpoint: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_output_tokens: u32,
    pub mock: MockMode,
    pub k: usize,
    pub tau_s: f64,
    pub max_steps: usize,
    pub same_app_only: bool,
    pub exclude_self: bool,
    pub description_mode: DescriptionMode,
    pub thresholds: Thresholds,
    pub min_avg_sim: f64,
    pub kshots: Vec<usize>,
    pub workers: usize,
    pub split: String,
    pub apps: Vec<String>,
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(config: &Config, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let value = config.get(key);
    value.parse().map_err(|e: T::Err| invalid(key, value, e.to_string()))
}

fn parse_bool(config: &Config, key: &str) -> Result<bool, ConfigError> {
    match config.get(key) {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(invalid(key, other, "expected true or false")),
    }
}

fn positive(config: &Config, key: &str) -> Result<usize, ConfigError> {
    let n: usize = parse_num(config, key)?;
    if n == 0 {
        return Err(invalid(key, config.get(key), "must be positive"));
    }
    Ok(n)
}

fn unit_interval(config: &Config, key: &str, low: f64) -> Result<f64, ConfigError> {
    let v: f64 = parse_num(config, key)?;
    if !(low..=1.0).contains(&v) {
        return Err(invalid(key, config.get(key), format!("must lie in [{low}, 1]")));
    }
    Ok(v)
}

impl Settings {
    pub fn from_config(config: &Config) -> Result<Self, ConfigError> {
        let mock = match config.get("mock") {
            "none" | "" => MockMode::None,
            "echo" => MockMode::Echo,
            other => match other.strip_prefix("scripted:") {
                Some(path) if !path.is_empty() => MockMode::Scripted(PathBuf::from(path)),
                _ => return Err(invalid("mock", other, "expected none, echo or scripted:<path>")),
            },
        };
        let embedder = match config.get("embedder") {
            "hash" => EmbedderKind::Hash,
            "http" => EmbedderKind::Http,
            other => return Err(invalid("embedder", other, "expected hash or http")),
        };
        let description_mode = match config.get("description_mode") {
            "model" => DescriptionMode::Model,
            "mechanical" => DescriptionMode::Mechanical,
            other => return Err(invalid("description_mode", other, "expected model or mechanical")),
        };
        let kshots = config
            .get("kshots")
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| match s.parse::<usize>() {
                Ok(k @ 1..=3) => Ok(k),
                _ => Err(invalid("kshots", config.get("kshots"), "each entry must be 1, 2 or 3")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let apps = config
            .get("apps")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        Ok(Self {
            chat_endpoint: config.get("chat_endpoint").to_string(),
            chat_model: config.get("chat_model").to_string(),
            embedder,
            embed_endpoint: config.get("embed_endpoint").to_string(),
            embed_model: config.get("embed_model").to_string(),
            embed_dim: positive(config, "embed_dim")?,
            timeout: Duration::from_secs(positive(config, "timeout_secs")? as u64),
            max_retries: parse_num(config, "max_retries")?,
            max_output_tokens: positive(config, "max_output_tokens")? as u32,
            mock,
            k: positive(config, "k")?,
            tau_s: unit_interval(config, "tau_s", -1.0)?,
            max_steps: positive(config, "max_steps")?,
            same_app_only: parse_bool(config, "same_app_only")?,
            exclude_self: parse_bool(config, "exclude_self")?,
            description_mode,
            thresholds: Thresholds {
                ui: unit_interval(config, "ui_threshold", 0.0)?,
                action: unit_interval(config, "action_threshold", -1.0)?,
            },
            min_avg_sim: unit_interval(config, "min_avg_sim", -1.0)?,
            kshots,
            workers: positive(config, "workers")?,
            split: config.get("split").to_string(),
            apps,
        })
    }

    pub fn executor_config(&self) -> ExecutorConfig {
        ExecutorConfig {
            max_steps: self.max_steps,
            retrieve: RetrieveOptions::new(self.k, self.tau_s),
            description_mode: self.description_mode,
            same_app_only: self.same_app_only,
            exclude_self: self.exclude_self,
        }
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        }
    }

    pub fn chat_backend_config(&self) -> Result<BackendConfig, ConfigError> {
        if self.chat_endpoint.is_empty() {
            return Err(ConfigError::Missing(
                "chat_endpoint is required unless a mock is selected".into(),
            ));
        }
        let mut config = BackendConfig::new(&self.chat_endpoint, &self.chat_model);
        config.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        config.timeout = self.timeout;
        config.retry = self.retry();
        Ok(config)
    }

    pub fn embed_backend_config(&self) -> Result<EmbedConfig, ConfigError> {
        if self.embed_endpoint.is_empty() {
            return Err(ConfigError::Missing("embed_endpoint is required when embedder = http".into()));
        }
        let mut backend = BackendConfig::new(&self.embed_endpoint, &self.embed_model);
        backend.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        backend.timeout = self.timeout;
        backend.retry = self.retry();
        Ok(EmbedConfig {
            backend,
            dimension: self.embed_dim,
            batch_size: 64,
        })
    }
}

impl Default for Settings {
    fn default() -> Self {
        Self::from_config(&Config::default()).expect("defaults are valid")
    }
}
