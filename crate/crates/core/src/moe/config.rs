use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::RouterKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Sparse mixture of experts.
    Gatets,
    /// Single-layer LSTM baseline.
    Lstm,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Gatets => "gatets",
            Arch::Lstm => "lstm",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gatets" => Ok(Arch::Gatets),
            "lstm" => Ok(Arch::Lstm),
            other => Err(Error::Config(format!("unknown arch '{other}' (expected gatets or lstm)"))),
        }
    }
}

/// Architecture hyperparameters. The key names double as the `[model]`
/// table of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateTsConfig {
    pub arch: Arch,
    /// Context length T.
    pub context: usize,
    /// Forecast horizon H.
    pub horizon: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    /// Experts active per token (k).
    pub active: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub router: RouterKind,
    pub seed: u64,
    /// Hidden width when `arch = "lstm"`.
    pub lstm_hidden: usize,
}

impl Default for GateTsConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Gatets,
            context: 64,
            horizon: 48,
            d_model: 48,
            n_heads: 4,
            n_experts: 16,
            active: 2,
            ffn_width: 48,
            dropout: 0.1,
            router: RouterKind::Attention,
            seed: 0,
            lstm_hidden: 64,
        }
    }
}

impl GateTsConfig {
    pub const KEYS: [&'static str; 12] = [
        "arch",
        "context",
        "horizon",
        "d_model",
        "n_heads",
        "n_experts",
        "active",
        "ffn_width",
        "dropout",
        "router",
        "seed",
        "lstm_hidden",
    ];

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.context == 0 || self.horizon == 0 {
            return fail(format!(
                "context ({}) and horizon ({}) must be >= 1",
                self.context, self.horizon
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        match self.arch {
            Arch::Lstm => {
                if self.lstm_hidden == 0 {
                    return fail("lstm_hidden must be >= 1".into());
                }
            }
            Arch::Gatets => {
                if self.d_model == 0 || self.ffn_width == 0 {
                    return fail("d_model and ffn_width must be >= 1".into());
                }
                if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
                    return fail(format!(
                        "d_model ({}) must be divisible by n_heads ({})",
                        self.d_model, self.n_heads
                    ));
                }
                if self.active == 0 || self.active > self.n_experts {
                    return fail(format!(
                        "need 1 <= active <= n_experts, got active={} n_experts={}",
                        self.active, self.n_experts
                    ));
                }
            }
        }
        Ok(())
    }

    /// Apply a `key=value` override by key name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "arch" => self.arch = value.parse()?,
            "context" => self.context = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_experts" => self.n_experts = num(key, value)?,
            "active" => self.active = num(key, value)?,
            "ffn_width" => self.ffn_width = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "router" => self.router = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "lstm_hidden" => self.lstm_hidden = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown model key '{other}'; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}
