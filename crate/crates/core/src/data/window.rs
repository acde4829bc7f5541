//! Sliding (context, target) windows that never cross a split boundary.

use std::ops::Range;
use std::sync::Arc;

use super::prep::{PreparedSeries, Split};
use crate::error::{Error, Result};
use crate::nncore::Tensor;

/// Number of windows of `t + h` points at `stride` inside `len` points.
pub fn window_count(len: usize, t: usize, h: usize, stride: usize) -> usize {
    if stride == 0 || len < t + h {
        0
    } else {
        (len - t - h) / stride + 1
    }
}

/// Windows over one split. Values are shared with the other splits of the
/// same series.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub split: Split,
    pub context: usize,
    pub horizon: usize,
    pub stride: usize,
    range: Range<usize>,
    normalized: Arc<Vec<f64>>,
    natural: Arc<Vec<f64>>,
    mean: f64,
    std: f64,
}

impl WindowDataset {
    /// Windows inside `range` of the given value arrays (normalised and
    /// natural units, same length).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        split: Split,
        normalized: Arc<Vec<f64>>,
        natural: Arc<Vec<f64>>,
        range: Range<usize>,
        context: usize,
        horizon: usize,
        stride: usize,
        (mean, std): (f64, f64),
    ) -> Result<Self> {
        if context == 0 || horizon == 0 || stride == 0 {
            return Err(Error::Config("context, horizon and stride must be >= 1".into()));
        }
        if normalized.len() != natural.len() || range.end > natural.len() {
            return Err(Error::Data(format!("{split} range {range:?} exceeds the series")));
        }
        if range.len() < context + horizon {
            return Err(Error::Data(format!(
                "{split} split has {} points, fewer than context + horizon = {}",
                range.len(),
                context + horizon
            )));
        }
        Ok(Self {
            split,
            context,
            horizon,
            stride,
            range,
            normalized,
            natural,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        window_count(self.range.len(), self.context, self.horizon, self.stride)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute index of the first context point of window `i`.
    pub fn start(&self, i: usize) -> usize {
        self.range.start + i * self.stride
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    fn span(&self, i: usize, target: bool) -> Range<usize> {
        assert!(i < self.len(), "window {i} out of range ({} windows)", self.len());
        let s = self.start(i);
        if target {
            s + self.context..s + self.context + self.horizon
        } else {
            s..s + self.context
        }
    }

    pub fn context_values(&self, i: usize) -> &[f64] {
        &self.normalized[self.span(i, false)]
    }

    pub fn target_values(&self, i: usize) -> &[f64] {
        &self.normalized[self.span(i, true)]
    }

    pub fn context_natural(&self, i: usize) -> &[f64] {
        &self.natural[self.span(i, false)]
    }

    pub fn target_natural(&self, i: usize) -> &[f64] {
        &self.natural[self.span(i, true)]
    }

    /// Natural-unit values of the whole series (for the MASE scale).
    pub fn natural_series(&self) -> &[f64] {
        &self.natural
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Normalised `([B, T], [B, H])` tensors for the given windows.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let x = idx.iter().flat_map(|&i| self.context_values(i).iter().copied()).collect();
        let y = idx.iter().flat_map(|&i| self.target_values(i).iter().copied()).collect();
        (
            Tensor::new(&[idx.len(), self.context], x).expect("window sizes are fixed"),
            Tensor::new(&[idx.len(), self.horizon], y).expect("window sizes are fixed"),
        )
    }
}

/// Train, validation and test windows of one prepared series.
#[derive(Debug, Clone)]
pub struct WindowSets {
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
}

impl WindowSets {
    pub fn get(&self, split: Split) -> &WindowDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn make_windows(prepared: &PreparedSeries, context: usize, horizon: usize, stride: usize) -> Result<WindowSets> {
    let normalized = Arc::new(prepared.normalized());
    let natural = Arc::new(prepared.values.clone());
    let norm = (prepared.normalization.mean, prepared.normalization.std);
    let mk = |split: Split| {
        WindowDataset::new(
            split,
            normalized.clone(),
            natural.clone(),
            prepared.splits.range(split),
            context,
            horizon,
            stride,
            norm,
        )
    };
    Ok(WindowSets {
        train: mk(Split::Train)?,
        val: mk(Split::Val)?,
        test: mk(Split::Test)?,
    })
}
