//! Imputation, aggregation, splitting and normalisation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Replace each missing value with the last observed one.
pub fn locf_impute(values: &[Option<f64>]) -> Result<Vec<f64>> {
    let mut last = match values.first() {
        None => return Ok(Vec::new()),
        Some(Some(v)) => *v,
        Some(None) => {
            return Err(Error::Data(
                "series starts with a missing value; nothing to carry forward".into(),
            ))
        }
    };
    Ok(values
        .iter()
        .map(|v| {
            if let Some(v) = v {
                last = *v;
            }
            last
        })
        .collect())
}

/// Means of non-overlapping blocks of `factor`; a trailing partial block is
/// dropped.
pub fn aggregate(values: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::Config("aggregation factor must be >= 1".into()));
    }
    Ok(values
        .chunks_exact(factor)
        .map(|c| c.iter().sum::<f64>() / factor as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train, val or test)"))),
        }
    }
}

impl Splits {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// Contiguous train/val/test ranges over `len` points. Boundaries are
/// floor-rounded and the remainder goes to test. Each split must hold at
/// least `min_len` points (one context plus horizon).
pub fn chronological_split(len: usize, ratios: (f64, f64, f64), min_len: usize) -> Result<Splits> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {a},{b},{c}")));
    }
    // The small slack keeps e.g. 0.8·100 from flooring to 79.
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    let train_end = floor(len as f64 * a).min(len);
    let val_end = (train_end + floor(len as f64 * b)).min(len);
    let splits = Splits {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..len,
    };
    for s in Split::ALL {
        let n = splits.range(s).len();
        if n < min_len {
            return Err(Error::Data(format!(
                "{s} split has {n} points but needs at least {min_len} (context + horizon)"
            )));
        }
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub raw_len: usize,
    pub imputed: usize,
    pub aggregation: usize,
}

/// Gap-free series in natural units with train-fitted normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSeries {
    pub name: String,
    pub values: Vec<f64>,
    pub normalization: Normalization,
    pub splits: Splits,
    pub provenance: Provenance,
}

impl PreparedSeries {
    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().map(|&v| self.normalization.apply(v)).collect()
    }

    /// Share of exact zeros among the split's values.
    pub fn zero_share(&self, split: Split) -> f64 {
        let r = self.splits.range(split);
        if r.is_empty() {
            return 0.0;
        }
        self.values[r.clone()].iter().filter(|&&v| v == 0.0).count() as f64 / r.len() as f64
    }
}

/// Fit z-score parameters on the train range (population standard
/// deviation). Other splits are not clipped.
pub fn standardize(values: Vec<f64>, splits: Splits) -> Result<PreparedSeries> {
    if splits.test.end > values.len() || splits.train.is_empty() {
        return Err(Error::Data(format!(
            "split ranges {splits:?} do not fit a series of length {}",
            values.len()
        )));
    }
    let train = &values[splits.train.clone()];
    let n = train.len() as f64;
    let mean = train.iter().sum::<f64>() / n;
    let std = (train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::Data("training segment is constant (zero standard deviation)".into()));
    }
    Ok(PreparedSeries {
        name: String::new(),
        values,
        normalization: Normalization { mean, std },
        splits,
        provenance: Provenance::default(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn locf_cases() {
        assert_eq!(locf_impute(&[Some(1.0), None, None, Some(4.0)]).unwrap(), vec![1.0, 1.0, 1.0, 4.0]);
        assert_eq!(locf_impute(&[Some(2.0), Some(3.0)]).unwrap(), vec![2.0, 3.0]);
        assert!(locf_impute(&[None, Some(1.0)]).is_err());
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![1.5, 3.5]);
        assert_eq!(aggregate(&[1.0, 2.0, 3.0], 1).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(aggregate(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap().len(), 2);
        assert!(aggregate(&[1.0], 0).is_err());
    }

    #[test]
    fn split_cases() {
        let s = chronological_split(100, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..80, 80..90, 90..100));
        let s = chronological_split(101, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..80, 80..90, 90..101));
        let err = chronological_split(100, (0.8, 0.1, 0.1), 12).unwrap_err().to_string();
        assert!(err.contains("val split"), "{err}");
        assert!(chronological_split(2, (0.8, 0.1, 0.1), 1).is_err());
        assert!(chronological_split(100, (0.8, 0.1, 0.2), 1).is_err());
    }

    #[test]
    fn standardize_cases() {
        let splits = Splits {
            train: 0..2,
            val: 2..2,
            test: 2..3,
        };
        let p = standardize(vec![0.0, 2.0, 3.0], splits.clone()).unwrap();
        assert_eq!(p.normalization, Normalization { mean: 1.0, std: 1.0 });
        assert_eq!(p.normalized(), vec![-1.0, 1.0, 2.0]);
        let far = standardize(vec![0.0, 2.0, 100.0], splits.clone()).unwrap();
        assert_eq!(far.normalized()[2], 99.0);
        assert!(standardize(vec![5.0, 5.0, 1.0], splits).is_err());
    }

    proptest! {
        #[test]
        fn locf_is_idempotent(v in prop::collection::vec(prop::option::of(-1e3..1e3f64), 1..60)) {
            let mut v = v;
            v[0] = Some(v[0].unwrap_or(0.5));
            let once = locf_impute(&v).unwrap();
            let twice = locf_impute(&once.iter().copied().map(Some).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(once.clone(), twice);
            prop_assert!(once.iter().zip(&v).all(|(a, b)| b.is_none_or(|b| *a == b)));
        }

        #[test]
        fn aggregate_preserves_block_aligned_mean(blocks in 1usize..20, factor in 1usize..8, seed in any::<u64>()) {
            let v: Vec<f64> = (0..blocks * factor).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
            let agg = aggregate(&v, factor).unwrap();
            let m1 = v.iter().sum::<f64>() / v.len() as f64;
            let m2 = agg.iter().sum::<f64>() / agg.len() as f64;
            prop_assert!((m1 - m2).abs() <= 1e-9 * m1.abs().max(1.0));
        }

        #[test]
        fn standardize_round_trips(v in prop::collection::vec(-1e4..1e4f64, 10..80)) {
            let n = v.len();
            let splits = chronological_split(n, (0.8, 0.1, 0.1), 1).unwrap();
            if let Ok(p) = standardize(v.clone(), splits) {
                for (z, x) in p.normalized().iter().zip(&v) {
                    prop_assert!((p.normalization.inverse(*z) - x).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }

        #[test]
        fn splits_partition_in_order(len in 3usize..5000, min in 1usize..4) {
            if let Ok(s) = chronological_split(len, (0.8, 0.1, 0.1), min) {
                prop_assert_eq!(s.train.start, 0);
                prop_assert_eq!(s.train.end, s.val.start);
                prop_assert_eq!(s.val.end, s.test.start);
                prop_assert_eq!(s.test.end, len);
            }
        }
    }
}
