//! Run configuration and its flat `section.key=value` text form.
//!
//! Resolution order: built-in defaults, then a training preset, then a
//! config file, then individual overrides. Later layers win.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adversarial::{EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_coarse: usize,
    /// Seed of the episode streams; the world has its own seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_seen: 2000,
            n_unseen: 500,
            n_coarse: 3,
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen == 0 {
            return Err(Error::config("data.n_seen", "must be at least 1"));
        }
        if self.n_unseen == 0 {
            return Err(Error::config("data.n_unseen", "must be at least 1"));
        }
        if self.n_coarse == 0 {
            return Err(Error::config("data.n_coarse", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn with_preset(name: &str) -> Result<Self> {
        Ok(Self {
            train: TrainConfig::preset(name)?,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.train.n_coarse > self.data.n_coarse {
            return Err(Error::config(
                "train.n_coarse",
                format!("exceeds the {} coarse negatives stored per episode", self.data.n_coarse),
            ));
        }
        for (field, v) in [
            ("encoder.hidden_dim", self.encoder.hidden_dim),
            ("encoder.scorer_dim", self.encoder.scorer_dim),
            ("encoder.token_dim", self.encoder.token_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// One `section.key=value` line per field, sorted by key.
    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (section, fields) in tree.as_object().expect("object") {
            for (key, v) in fields.as_object().expect("section object") {
                let text = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out.push_str(&format!("{section}.{key}={text}\n"));
            }
        }
        out
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_flat(&self, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("config", format!("line {}: expected key=value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)
    }

    /// Sets each `section.key` to `value`. The value is read with the type
    /// of the field it replaces.
    pub fn apply_pairs(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (key, raw) in pairs {
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::config(key, "expected `section.key`"))?;
            let slot = tree
                .get_mut(section)
                .and_then(Value::as_object_mut)
                .and_then(|m: &mut Map<String, Value>| m.get_mut(field))
                .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
            *slot = match slot {
                Value::String(_) => Value::String(raw.clone()),
                Value::Bool(_) => Value::Bool(
                    raw.parse()
                        .map_err(|_| Error::config(key, format!("expected true or false, got `{raw}`")))?,
                ),
                _ => serde_json::from_str(raw)
                    .map_err(|_| Error::config(key, format!("expected a number, got `{raw}`")))?,
            };
            // type-check each field as it is set so the error names it
            serde_json::from_value::<RunConfig>(tree.clone()).map_err(|e| Error::config(key, e.to_string()))?;
        }
        Ok(serde_json::from_value(tree)?)
    }

    pub fn apply_file(&self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_flat(&text)
    }

    /// Every configuration key, in `to_flat` order.
    pub fn keys() -> Vec<String> {
        Self::default()
            .to_flat()
            .lines()
            .map(|l| l.split_once('=').expect("key=value").0.to_string())
            .collect()
    }
}

/// Layers: defaults, `preset`, `file`, then `overrides` in order.
pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match preset {
        Some(p) => RunConfig::with_preset(p)?,
        None => RunConfig::default(),
    };
    if let Some(f) = file {
        cfg = cfg.apply_file(f)?;
    }
    cfg = cfg.apply_pairs(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
