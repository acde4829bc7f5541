use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::AdamWConfig;

/// Optimisation settings. Key names double as the `[train]` table of a
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Share of all optimizer steps spent in linear warm-up.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Write a resumable checkpoint every this many epochs (0 = only at the
    /// end).
    pub checkpoint_every: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup_fraction: 0.05,
            seed: 0,
            checkpoint_every: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "warmup_fraction",
        "seed",
        "checkpoint_every",
        "patience",
    ];

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            base_lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1".into());
        }
        // lr = 0 is allowed: it freezes the parameters.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("eps must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if self.patience == Some(0) {
            return fail("patience must be >= 1 when set".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_fraction" => self.warmup_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "patience" => {
                self.patience = match value {
                    "none" | "off" | "" => None,
                    v => Some(num(key, v)?),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown train key '{other}'; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}
