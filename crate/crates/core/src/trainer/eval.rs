//! Held-out evaluation shared by every forecaster.

use crate::data::{Split, WindowDataset, WindowSets};
use crate::error::{Error, Result};
use crate::gating::RoutingDecision;
use crate::metrics::{EvalReport, ForecastScorer, IntervalKind, UtilizationCounter};
use crate::moe::{count_parameters, naive_forecast_batch, Model};
use crate::nncore::Tensor;

pub const EVAL_BATCH: usize = 256;

/// Anything that maps `[B, T]` normalised contexts to `[B, H]` forecasts.
pub trait Forecaster {
    fn name(&self) -> String;
    fn context(&self) -> usize;
    fn horizon(&self) -> usize;
    /// `(total, active)` parameter counts.
    fn parameter_counts(&self) -> (usize, usize);
    fn forecast(&self, x: &Tensor) -> Result<(Tensor, Option<RoutingDecision>)>;
}

impl Forecaster for Model {
    fn name(&self) -> String {
        match self.config().arch {
            crate::moe::Arch::Gatets => format!("gatets-{}", self.config().router),
            crate::moe::Arch::Lstm => "lstm".into(),
        }
    }

    fn context(&self) -> usize {
        self.config().context
    }

    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn parameter_counts(&self) -> (usize, usize) {
        count_parameters(self.config())
    }

    fn forecast(&self, x: &Tensor) -> Result<(Tensor, Option<RoutingDecision>)> {
        self.predict(x)
    }
}

/// Last observed value repeated over the horizon.
#[derive(Debug, Clone, Copy)]
pub struct NaiveForecaster {
    pub context: usize,
    pub horizon: usize,
}

impl Forecaster for NaiveForecaster {
    fn name(&self) -> String {
        "naive".into()
    }

    fn context(&self) -> usize {
        self.context
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn parameter_counts(&self) -> (usize, usize) {
        (0, 0)
    }

    fn forecast(&self, x: &Tensor) -> Result<(Tensor, Option<RoutingDecision>)> {
        Ok((naive_forecast_batch(x, self.horizon)?, None))
    }
}

/// Forecasts in natural units for every window of `data`, with routing.
pub fn forecast_windows(
    f: &dyn Forecaster,
    data: &WindowDataset,
) -> Result<(Vec<Vec<f64>>, Vec<RoutingDecision>)> {
    if f.context() != data.context || f.horizon() != data.horizon {
        return Err(Error::Config(format!(
            "model expects context {} / horizon {}, dataset has {} / {}",
            f.context(),
            f.horizon(),
            data.context,
            data.horizon
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    let mut routing = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let (y, r) = f.forecast(&x)?;
        if !y.is_finite() {
            return Err(Error::Numeric("forecast contains non-finite values".into()));
        }
        preds.extend(
            y.data()
                .chunks_exact(data.horizon)
                .map(|row| row.iter().map(|&z| data.denormalize(z)).collect::<Vec<_>>()),
        );
        routing.extend(r);
    }
    Ok((preds, routing))
}

/// Eval-mode metrics over every window of `split`, in natural units. The
/// MASE scale comes from the training split; SMAPE is suppressed for
/// zero-heavy splits.
pub fn evaluate(f: &dyn Forecaster, sets: &WindowSets, split: Split, kind: IntervalKind) -> Result<EvalReport> {
    let data = sets.get(split);
    let natural = data.natural_series();
    let train = &natural[sets.train.range()];
    let targets = &natural[data.range()];
    let zero_share = targets.iter().filter(|&&v| v == 0.0).count() as f64 / targets.len() as f64;
    let mut scorer = ForecastScorer::new(train, zero_share, kind)?;
    let (preds, routing) = forecast_windows(f, data)?;
    for (i, p) in preds.iter().enumerate() {
        scorer.push(data.target_natural(i), p)?;
    }
    let utilization = if routing.is_empty() {
        None
    } else {
        let mut c = UtilizationCounter::new(routing[0].experts);
        for d in &routing {
            c.record_decision(d);
        }
        Some(c.finish()?)
    };
    scorer.finish(&f.name(), split.name(), f.parameter_counts(), utilization)
}
