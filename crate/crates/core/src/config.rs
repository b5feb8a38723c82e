//! Run configuration: one TOML file with a section per stage, overridable
//! by `section.key=value` pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::synth::CorpusConfig;
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("override {0:?} is not of the form section.key=value")]
    OverrideSyntax(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set it replaces the corpus, model-init and
    /// training seeds.
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order and resolves the
    /// master seed.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::File { path: p.display().to_string(), message: e.to_string() })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::File { path: p.display().to_string(), message: e.to_string() })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_string()))?;
        cfg.resolve_seed();
        Ok(cfg)
    }

    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.corpus.seed = s;
            self.model.init_seed = s;
            self.train.seed = s;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `section.key` (or a top-level `key`) in `table`. The value is
/// parsed as a TOML value, falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let spec = spec.strip_prefix("--").unwrap_or(spec);
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(spec.to_string()))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) || keys.len() > 2 {
        return Err(ConfigError::OverrideSyntax(spec.to_string()));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut target = table;
    for k in &keys[..keys.len() - 1] {
        let entry = target.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        target = entry.as_table_mut().ok_or_else(|| ConfigError::Invalid(format!("{k} is not a section")))?;
    }
    target.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
