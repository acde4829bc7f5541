//! Deterministic synthetic streams for tests and demos.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::load::RawSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Noiseless sine, period 24, amplitude 1.
    Sine,
    /// Blocks of 200 steps alternating between an oscillating AR(2) and a
    /// slow AR(1).
    Regime,
    /// Daily (24-step) daylight bumps with exact zeros at night.
    Intermittent,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Sine => "sine",
            SynthKind::Regime => "regime",
            SynthKind::Intermittent => "intermittent",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "regime" => Ok(SynthKind::Regime),
            "intermittent" => Ok(SynthKind::Intermittent),
            other => Err(Error::Config(format!(
                "unknown synthetic kind '{other}' (expected sine, regime or intermittent)"
            ))),
        }
    }
}

pub const REGIME_BLOCK: usize = 200;

pub fn synth_series(kind: SynthKind, length: usize, seed: u64) -> Result<RawSeries> {
    if length == 0 {
        return Err(Error::Config("synthetic length must be > 0".into()));
    }
    let values = match kind {
        SynthKind::Sine => sine_values(length, 24.0, 1.0, 0.0, seed),
        SynthKind::Regime => regime_values(length, seed),
        SynthKind::Intermittent => intermittent_values(length, seed),
    };
    Ok(RawSeries::from_values(format!("synthetic-{kind}"), values))
}

/// `amplitude·sin(2πt/period)` plus Gaussian noise.
pub fn sine_values(length: usize, period: f64, amplitude: f64, noise_std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("non-negative std");
    (0..length)
        .map(|t| {
            let clean = amplitude * (2.0 * PI * t as f64 / period).sin();
            if noise_std > 0.0 {
                clean + noise.sample(&mut rng)
            } else {
                clean
            }
        })
        .collect()
}

fn regime_values(length: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, 0.1).expect("valid std");
    // Oscillating regime: complex roots at radius 0.95, period 8.
    let (r, w) = (0.95, 2.0 * PI / 8.0);
    let (a1, a2) = (2.0 * r * w.cos(), -r * r);
    let mut out = Vec::with_capacity(length);
    let (mut x1, mut x2) = (0.0, 0.0);
    for t in 0..length {
        let x = if (t / REGIME_BLOCK).is_multiple_of(2) {
            a1 * x1 + a2 * x2 + eps.sample(&mut rng)
        } else {
            0.97 * x1 + 0.3 * eps.sample(&mut rng)
        };
        out.push(x);
        x2 = x1;
        x1 = x;
    }
    out
}

fn intermittent_values(length: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dawn, dusk) = (7, 17);
    let mut peak = 1.0;
    (0..length)
        .map(|t| {
            let hour = t % 24;
            if hour == 0 {
                peak = rng.random_range(0.4..1.0);
            }
            if (dawn..dusk).contains(&hour) {
                let phase = (hour - dawn) as f64 + 0.5;
                let cloud = rng.random_range(0.85..1.0);
                peak * cloud * (PI * phase / (dusk - dawn) as f64).sin()
            } else {
                0.0
            }
        })
        .collect()
}
