//! Run configuration: defaults, then the TOML file, then flags, then
//! `--set key=value` overrides.

use std::fs;
use std::path::Path;

use gatets::moe::GateTsConfig;
use gatets::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Block-mean factor applied after imputation.
    pub aggregate: usize,
    /// Train/val/test shares.
    pub split: [f64; 3],
    /// Stride between training windows (evaluation always uses 1).
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            aggregate: 1,
            split: [0.8, 0.1, 0.1],
            stride: 1,
        }
    }
}

impl DataConfig {
    pub const KEYS: [&'static str; 3] = ["aggregate", "split", "stride"];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = || CliError::Usage(format!("invalid value '{value}' for data.{key}"));
        match key {
            "aggregate" => self.aggregate = value.parse().map_err(|_| bad())?,
            "stride" => self.stride = value.parse().map_err(|_| bad())?,
            "split" => self.split = parse_split(value)?,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown data key '{other}'; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.aggregate == 0 || self.stride == 0 {
            return Err(CliError::Usage("aggregate and stride must be >= 1".into()));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(CliError::Usage(format!(
                "split shares must be positive and sum to 1, got {:?}",
                self.split
            )));
        }
        Ok(())
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

pub fn parse_split(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--split expects three numbers like 0.8,0.1,0.1, got '{s}'")))?;
    <[f64; 3]>::try_from(parts)
        .map_err(|_| CliError::Usage(format!("--split expects exactly three shares, got '{s}'")))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: GateTsConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// One seed drives model init, shuffling, dropout and synthetic data.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// `section.key=value` or a bare `key=value` resolved against the
    /// model, train and data tables in that order.
    pub fn apply_override(&mut self, arg: &str) -> Result<(), CliError> {
        let (key, value) = arg
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{arg}'")))?;
        let (section, key) = match key.split_once('.') {
            Some((s, k)) => (Some(s), k),
            None => (None, key),
        };
        let section = section.or_else(|| {
            if GateTsConfig::KEYS.contains(&key) {
                Some("model")
            } else if TrainConfig::KEYS.contains(&key) {
                Some("train")
            } else if DataConfig::KEYS.contains(&key) {
                Some("data")
            } else {
                None
            }
        });
        match section {
            Some("model") => self.model.set(key, value).map_err(usage),
            Some("train") => self.train.set(key, value).map_err(usage),
            Some("data") => self.data.set(key, value),
            _ => Err(CliError::Usage(format!(
                "unknown override key '{key}'; valid keys: {}",
                valid_keys().join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.data.validate()
    }
}

fn usage(e: gatets::error::Error) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn valid_keys() -> Vec<String> {
    let mut keys = Vec::new();
    keys.extend(GateTsConfig::KEYS.iter().map(|k| format!("model.{k}")));
    keys.extend(TrainConfig::KEYS.iter().map(|k| format!("train.{k}")));
    keys.extend(DataConfig::KEYS.iter().map(|k| format!("data.{k}")));
    keys
}
