//! Series ingestion, cleaning, splitting, normalisation and windowing.

pub mod load;
pub mod prep;
pub mod synth;
pub mod window;

pub use load::{load_series, parse_csv, parse_tsf, Format, RawSeries};
pub use prep::{
    aggregate, chronological_split, locf_impute, standardize, Normalization, PreparedSeries, Provenance,
    Split, Splits,
};
pub use synth::{sine_values, synth_series, SynthKind, REGIME_BLOCK};
pub use window::{make_windows, window_count, WindowDataset, WindowSets};

use crate::error::Result;

/// Raw series → LOCF → block means → split → train-fitted z-score.
pub fn prepare_series(
    raw: &RawSeries,
    aggregation: usize,
    ratios: (f64, f64, f64),
    min_split_len: usize,
) -> Result<PreparedSeries> {
    let filled = locf_impute(&raw.values)?;
    let values = aggregate(&filled, aggregation)?;
    let splits = chronological_split(values.len(), ratios, min_split_len)?;
    let mut p = standardize(values, splits)?;
    p.name = raw.name.clone();
    p.provenance = Provenance {
        source: raw.name.clone(),
        raw_len: raw.len(),
        imputed: raw.missing_count(),
        aggregation,
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_records_provenance() {
        let mut raw = RawSeries::from_values("s", (0..100).map(|i| (i as f64).sin()).collect());
        raw.values[10] = None;
        raw.values[11] = None;
        let p = prepare_series(&raw, 2, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(p.values.len(), 50);
        assert_eq!(p.provenance.imputed, 2);
        assert_eq!(p.provenance.aggregation, 2);
        assert_eq!(p.splits.test, 45..50);
    }
}
