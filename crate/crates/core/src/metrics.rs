//! Point-forecast metrics, interval estimates and routing diagnostics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::gating::RoutingDecision;

/// Zero share above which SMAPE is reported as suppressed.
pub const SMAPE_ZERO_SHARE_LIMIT: f64 = 0.2;

fn check_len(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::shape("metric", &[y.len()], &[yhat.len()]));
    }
    if y.is_empty() {
        return Err(Error::Data("metric over an empty sequence".into()));
    }
    Ok(())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    Ok((y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

/// Percentage in [0, 200]; terms with `y = ŷ = 0` count as 0.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    let total: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                200.0 * (a - b).abs() / den
            }
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// In-sample one-step naive MAE of the training series.
pub fn mase_scale(train: &[f64]) -> Result<f64> {
    if train.len() < 2 {
        return Err(Error::Data("MASE needs at least two training points".into()));
    }
    let scale = train.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (train.len() - 1) as f64;
    if !(scale > 0.0) {
        return Err(Error::Numeric(
            "degenerate MASE scale: the training series is constant".into(),
        ));
    }
    Ok(scale)
}

pub fn mase(y: &[f64], yhat: &[f64], train: &[f64]) -> Result<f64> {
    let scale = mase_scale(train)?;
    Ok(mae(y, yhat)? / scale)
}

/// How the ± column is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalKind {
    /// 95% normal approximation: 1.96·s/√n.
    #[default]
    Ci95,
    /// Standard error s/√n.
    Stderr,
}

impl IntervalKind {
    fn z(self) -> f64 {
        match self {
            IntervalKind::Ci95 => 1.96,
            IntervalKind::Stderr => 1.0,
        }
    }
}

/// `(mean, half_width)` with the sample standard deviation.
pub fn interval(values: &[f64], kind: IntervalKind) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Data(format!("an interval needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, kind.z() * var.sqrt() / (n as f64).sqrt()))
}

/// 95% normal-approximation interval of the mean.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    interval(values, IntervalKind::Ci95)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    /// Share of selected slots per expert; sums to 1.
    pub frequencies: Vec<f64>,
    pub distinct_sets: usize,
    /// Shannon entropy of `frequencies` in nats.
    pub entropy: f64,
    pub tokens: usize,
}

/// Tally expert selections over any number of routing decisions.
#[derive(Debug, Clone, Default)]
pub struct UtilizationCounter {
    counts: Vec<u64>,
    sets: BTreeSet<Vec<usize>>,
    tokens: usize,
}

impl UtilizationCounter {
    pub fn new(experts: usize) -> Self {
        Self {
            counts: vec![0; experts],
            ..Default::default()
        }
    }

    /// Record one token's selected experts.
    pub fn record(&mut self, selected: &[usize]) {
        for &e in selected {
            if e >= self.counts.len() {
                self.counts.resize(e + 1, 0);
            }
            self.counts[e] += 1;
        }
        let mut s = selected.to_vec();
        s.sort_unstable();
        self.sets.insert(s);
        self.tokens += 1;
    }

    pub fn record_decision(&mut self, d: &RoutingDecision) {
        for tok in 0..d.tokens() {
            self.record(d.selected_for(tok));
        }
    }

    pub fn finish(&self) -> Result<Utilization> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("no routing decisions recorded".into()));
        }
        let frequencies: Vec<f64> = self.counts.iter().map(|&c| c as f64 / total as f64).collect();
        let entropy = -frequencies.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        Ok(Utilization {
            frequencies,
            distinct_sets: self.sets.len(),
            entropy,
            tokens: self.tokens,
        })
    }
}

pub fn utilization(decisions: &[RoutingDecision]) -> Result<Utilization> {
    let experts = decisions.first().map_or(0, |d| d.experts);
    let mut c = UtilizationCounter::new(experts);
    for d in decisions {
        c.record_decision(d);
    }
    c.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Absent with fewer than two windows.
    pub half_width: Option<f64>,
}

impl MetricSummary {
    pub fn from_windows(values: &[f64], kind: IntervalKind) -> Self {
        match interval(values, kind) {
            Ok((mean, hw)) => Self {
                mean,
                half_width: Some(hw),
            },
            Err(_) => Self {
                mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
                half_width: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub windows: usize,
    pub interval: IntervalKind,
    pub mae: MetricSummary,
    pub rmse: MetricSummary,
    /// `None` when suppressed; see `smape_note`.
    pub smape: Option<MetricSummary>,
    pub smape_note: Option<String>,
    pub mase: MetricSummary,
    pub params_total: usize,
    pub params_active: usize,
    pub utilization: Option<Utilization>,
}

/// Per-window metrics in natural units.
pub struct ForecastScorer {
    scale: f64,
    suppress_smape: bool,
    zero_share: f64,
    kind: IntervalKind,
    mae: Vec<f64>,
    rmse: Vec<f64>,
    smape: Vec<f64>,
    mase: Vec<f64>,
}

impl ForecastScorer {
    /// `train` sets the MASE scale; `zero_share` is the share of exact zeros
    /// in the evaluated split and decides whether SMAPE is reported.
    pub fn new(train: &[f64], zero_share: f64, kind: IntervalKind) -> Result<Self> {
        Ok(Self {
            scale: mase_scale(train)?,
            suppress_smape: zero_share > SMAPE_ZERO_SHARE_LIMIT,
            zero_share,
            kind,
            mae: Vec::new(),
            rmse: Vec::new(),
            smape: Vec::new(),
            mase: Vec::new(),
        })
    }

    pub fn push(&mut self, y: &[f64], yhat: &[f64]) -> Result<()> {
        let m = mae(y, yhat)?;
        self.mae.push(m);
        self.rmse.push(rmse(y, yhat)?);
        self.smape.push(smape(y, yhat)?);
        self.mase.push(m / self.scale);
        Ok(())
    }

    pub fn windows(&self) -> usize {
        self.mae.len()
    }

    pub fn finish(
        &self,
        model: &str,
        split: &str,
        (params_total, params_active): (usize, usize),
        utilization: Option<Utilization>,
    ) -> Result<EvalReport> {
        if self.mae.is_empty() {
            return Err(Error::Data(format!("no windows to evaluate in the {split} split")));
        }
        let s = |v: &[f64]| MetricSummary::from_windows(v, self.kind);
        Ok(EvalReport {
            model: model.to_string(),
            split: split.to_string(),
            windows: self.mae.len(),
            interval: self.kind,
            mae: s(&self.mae),
            rmse: s(&self.rmse),
            smape: (!self.suppress_smape).then(|| s(&self.smape)),
            smape_note: self.suppress_smape.then(|| {
                format!(
                    "suppressed (zero-heavy): {:.1}% of targets are exactly zero",
                    100.0 * self.zero_share
                )
            }),
            mase: s(&self.mase),
            params_total,
            params_active,
            utilization,
        })
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(a) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), "none".into())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("report is serialisable");
        if let (Value::Object(m), None) = (&mut v, &self.smape) {
            m.insert("smape".into(), Value::String("suppressed (zero-heavy)".into()));
        }
        v
    }

    /// Flat `key=value` lines with the same fields as [`Self::to_json`].
    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        flatten("", &self.to_json(), &mut out);
        out.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parse the text form back into flattened pairs.
    pub fn parse_text(text: &str) -> Map<String, Value> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn mae_rmse_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[0.0, 0.0], &[0.0, 2.0]).unwrap(), 2f64.sqrt());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn smape_cases() {
        assert_eq!(smape(&[3.0, -1.0], &[3.0, -1.0]).unwrap(), 0.0);
        assert_eq!(smape(&[1.0], &[0.0]).unwrap(), 200.0);
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn mase_cases() {
        let train = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(mase(&[5.0], &[4.0], &train).unwrap(), 1.0);
        assert_eq!(mase(&[5.0], &[5.0], &train).unwrap(), 0.0);
        assert!(matches!(mase(&[1.0], &[2.0], &[4.0, 4.0, 4.0]), Err(Error::Numeric(_))));
        assert!(mase(&[1.0], &[2.0], &[4.0]).is_err());
    }

    #[test]
    fn interval_cases() {
        assert_eq!(confidence_interval(&[3.0, 3.0, 3.0]).unwrap(), (3.0, 0.0));
        let (m, hw) = confidence_interval(&[0.0, 2.0]).unwrap();
        assert_eq!(m, 1.0);
        assert!((hw - 1.96).abs() < 1e-12);
        assert!(confidence_interval(&[1.0]).is_err());
        let base = [1.0, 4.0, 2.0, 7.0];
        let (_, h1) = confidence_interval(&base).unwrap();
        let rep: Vec<f64> = base.iter().cycle().take(400).copied().collect();
        let (_, h100) = confidence_interval(&rep).unwrap();
        // Replication by 100 shrinks by √100, up to the n−1 correction.
        let ratio = h1 / h100;
        let exact = 10.0 * ((399.0 / 3.0) / 100.0f64).sqrt();
        assert!((ratio - exact).abs() < 1e-9, "{ratio} {exact}");
    }

    #[test]
    fn utilization_cases() {
        let mut c = UtilizationCounter::new(8);
        c.record(&[7, 3]);
        let u = c.finish().unwrap();
        assert_eq!(u.frequencies[3], 0.5);
        assert_eq!(u.frequencies[7], 0.5);
        assert_eq!(u.distinct_sets, 1);
        c.record(&[3, 7]);
        assert_eq!(c.finish().unwrap().distinct_sets, 1);
        assert!(UtilizationCounter::new(4).finish().is_err());
    }

    #[test]
    fn uniform_routing_balances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let e = 8;
        let mut c = UtilizationCounter::new(e);
        for _ in 0..10_000 {
            let a = rng.random_range(0..e);
            let b = (a + rng.random_range(1..e)) % e;
            c.record(&[a, b]);
        }
        let u = c.finish().unwrap();
        for f in &u.frequencies {
            assert!((f - 1.0 / e as f64).abs() < 0.05 / e as f64, "{f}");
        }
        assert!((u.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn report_text_matches_json() {
        let mut s = ForecastScorer::new(&[0.0, 1.0, 0.0, 1.0], 0.5, IntervalKind::Ci95).unwrap();
        s.push(&[0.0, 1.0], &[0.5, 1.0]).unwrap();
        s.push(&[0.0, 0.0], &[0.0, 0.2]).unwrap();
        let r = s.finish("gatets", "test", (10, 6), None).unwrap();
        assert!(r.smape.is_none());
        let text = r.to_text();
        assert!(text.contains("smape=suppressed (zero-heavy)"), "{text}");
        assert!(text.contains("params_total=10"));
        let mut flat = Vec::new();
        flatten("", &r.to_json(), &mut flat);
        let parsed = EvalReport::parse_text(&text);
        assert_eq!(parsed.len(), flat.len());
        for (k, v) in flat {
            assert_eq!(parsed[&k], Value::String(v));
        }
    }

    proptest! {
        #[test]
        fn metric_laws(pairs in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..40), c in 0.01..100.0f64) {
            let (y, yh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(rmse(&y, &yh).unwrap() + 1e-12 >= mae(&y, &yh).unwrap());
            prop_assert!((smape(&y, &yh).unwrap() - smape(&yh, &y).unwrap()).abs() < 1e-12);
            let s = smape(&y, &yh).unwrap();
            // Opposite signs hit the bound up to rounding.
            prop_assert!((0.0..=200.0 + 1e-12).contains(&s));
            let train: Vec<f64> = y.iter().chain(&yh).copied().collect();
            if let Ok(m) = mase(&y, &yh, &train) {
                let scale = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
                let m2 = mase(&scale(&y), &scale(&yh), &scale(&train)).unwrap();
                prop_assert!((m - m2).abs() <= 1e-9 * m.max(1.0));
            }
            prop_assert_eq!(mae(&y, &y).unwrap(), 0.0);
            prop_assert_eq!(rmse(&y, &y).unwrap(), 0.0);
            prop_assert_eq!(smape(&y, &y).unwrap(), 0.0);
        }
    }
}
