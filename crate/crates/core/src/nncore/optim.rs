//! AdamW with decoupled weight decay, and the warm-up + cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held a NaN or infinity; parameters and moments untouched.
    SkippedNonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub hyper: AdamWConfig,
}

impl OptimizerState {
    pub fn new(hyper: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            hyper,
        }
    }

    fn check_congruent(&self, params: &ParamStore) -> Result<()> {
        let ok = self.first_moment.len() == params.len()
            && self.second_moment.len() == params.len()
            && params.tensors().iter().enumerate().all(|(i, t)| {
                self.first_moment[i].len() == t.numel() && self.second_moment[i].len() == t.numel()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer moments do not match parameters".into()))
        }
    }
}

/// One AdamW update at learning rate `lr` using the gradients stored on
/// `params`. Parameters without a gradient are treated as having a zero one.
///
/// Decay is applied first (`θ ← θ − lr·wd·θ`), then the bias-corrected
/// Adam step on the loss gradient.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<StepOutcome> {
    state.check_congruent(params)?;
    let finite = params
        .tensors()
        .iter()
        .all(|t| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
    if !finite {
        return Ok(StepOutcome::SkippedNonFinite);
    }

    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let decay = 1.0 - lr * h.weight_decay;

    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let grad = tensor.grad().map(<[f64]>::to_vec);
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, theta) in tensor.data_mut().iter_mut().enumerate() {
            let gj = grad.as_ref().map_or(0.0, |g| g[j]);
            *theta *= decay;
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Linear warm-up followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub base_lr: f64,
}

impl ScheduleState {
    pub fn new(warmup_steps: u64, total_steps: u64, base_lr: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warm-up ({warmup_steps}) must be shorter than the run ({total_steps} steps)"
            )));
        }
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("base lr must be finite and >= 0, got {base_lr}")));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            base_lr,
        })
    }

    /// Warm-up covering `fraction` of `total_steps` (floored).
    pub fn with_warmup_fraction(total_steps: u64, fraction: f64, base_lr: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("warm-up fraction must be in [0, 1), got {fraction}")));
        }
        let warmup = (total_steps as f64 * fraction).floor() as u64;
        Self::new(warmup, total_steps, base_lr)
    }
}

/// Learning rate for the zero-based optimizer step `step`.
///
/// During warm-up the rate is `base·(step+1)/(warmup+1)`, reaching `base`
/// exactly at `step == warmup`; afterwards it follows
/// `base·½(1 + cos(π·progress))` with progress running from 0 at the end of
/// warm-up to 1 at `total_steps`.
pub fn cosine_lr(step: u64, sched: &ScheduleState) -> f64 {
    let step = step.min(sched.total_steps);
    if step < sched.warmup_steps {
        return sched.base_lr * (step + 1) as f64 / (sched.warmup_steps + 1) as f64;
    }
    let span = (sched.total_steps - sched.warmup_steps) as f64;
    let progress = (step - sched.warmup_steps) as f64 / span;
    (sched.base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}
