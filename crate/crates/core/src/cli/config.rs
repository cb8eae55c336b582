//! The run configuration file: `[model]`, `[train]`, `[data]`, `[paths]`.
//!
//! Resolution starts from the defaults (or a preset named by `model.preset`),
//! overlays the file key by key and rejects unknown keys and mistyped values
//! with their full key path.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{check_size, AugmentConfig, DifficultyMix};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Side length of synthetic samples.
    pub size: usize,
    /// First synthetic seed; splits use consecutive ranges from here.
    pub base_seed: u64,
    /// Fractions of regular, irregular and low-contrast lesions.
    pub difficulty_mix: [f64; 3],
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            n_test: 50,
            size: ModelConfig::default().input_size,
            base_seed: 1000,
            difficulty_mix: DifficultyMix::default().0,
            augment: AugmentConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn mix(&self) -> DifficultyMix {
        DifficultyMix(self.difficulty_mix)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("data.n_train", self.n_train), ("data.n_val", self.n_val), ("data.n_test", self.n_test)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        check_size(self.size).map_err(|_| Error::config("data.size", format!("{} is not a positive multiple of 32", self.size)))?;
        self.mix().validate()?;
        self.augment.validate()
    }

    pub fn augmenting(&self) -> bool {
        let a = &self.augment;
        a.hflip || a.vflip || a.rotate90 || a.brightness || a.contrast || a.gamma || a.noise
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<name>.ppm` / `<name>_mask.pgm` pairs. Synthetic data
    /// is generated when unset.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/medlitenet"),
            checkpoint: None,
            dataset_dir: None,
        }
    }
}

/// Keys that may be absent from the defaults.
const OPTIONAL_KEYS: [&str; 2] = ["paths.checkpoint", "paths.dataset_dir"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfigFile {
    /// Defaults with the model replaced by a preset and the synthetic sample
    /// size matched to its input size.
    pub fn with_preset(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name)?;
        let mut cfg = Self::default();
        cfg.data.size = model.input_size;
        cfg.model = model;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("cannot encode config: {e}")))
    }

    /// Parses and resolves a config document. `preset` overrides any
    /// `model.preset` key in the text.
    pub fn resolve(text: &str, preset: Option<&str>) -> Result<Self> {
        let mut user: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            what: "config",
            offset: e.span().map_or(0, |s| s.start as u64),
            reason: e.message().to_string(),
        })?;
        let file_preset = match user.get_mut("model").and_then(Value::as_table_mut).and_then(|m| m.remove("preset")) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(other) => return Err(Error::config("model.preset", format!("expected a string, found {}", other.type_str()))),
        };
        let base = match preset.map(str::to_string).or(file_preset) {
            Some(p) => Self::with_preset(&p)?,
            None => Self::default(),
        };
        let mut merged = Value::try_from(&base).map_err(|e| Error::InvalidArgument(format!("cannot encode defaults: {e}")))?;
        overlay(merged.as_table_mut().expect("config is a table"), user, "")?;
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Integers are accepted where the default is a float.
fn coerce(base: &Value, user: Value, path: &str) -> Result<Value> {
    match (base, user) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Table(b), Value::Table(u)) => {
            let mut b = b.clone();
            overlay(&mut b, u, path)?;
            Ok(Value::Table(b))
        }
        (Value::Array(b), Value::Array(u)) => {
            let elem = b.first();
            u.into_iter()
                .enumerate()
                .map(|(i, v)| match elem {
                    Some(e) => coerce(e, v, &format!("{path}[{i}]")),
                    None => Ok(v),
                })
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        (b, u) if b.same_type(&u) => Ok(u),
        (b, u) => Err(Error::config(path, format!("expected {}, found {}", b.type_str(), u.type_str()))),
    }
}

fn overlay(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = join(prefix, &key);
        match base.get(&key) {
            Some(b) => {
                let v = coerce(b, value, &path)?;
                base.insert(key, v);
            }
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(key, value);
            }
            None => return Err(Error::config(path, "unknown key")),
        }
    }
    Ok(())
}
