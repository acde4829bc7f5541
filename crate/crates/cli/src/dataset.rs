//! Dataset argument resolution: a CSV/TSF file, a prepared-series JSON
//! written by `prepare`, or `synth:<kind>[:length]`.

use std::fs;
use std::path::{Path, PathBuf};

use gatets::data::{load_series, prepare_series, synth_series, Format, PreparedSeries, RawSeries, SynthKind};
use gatets::error::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::CliError;

const DEFAULT_SYNTH_LEN: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetInfo {
    pub source: String,
    /// SHA-256 of the file bytes, or of the generated values for synthetic
    /// series.
    pub sha256: String,
}

pub enum Source {
    File { path: PathBuf, format: Format },
    Prepared(PathBuf),
    Synth { kind: SynthKind, length: usize },
}

pub fn parse_source(arg: &str) -> Result<Source, CliError> {
    if let Some(rest) = arg.strip_prefix("synth:") {
        let mut parts = rest.split(':');
        let kind: SynthKind = parts
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e: Error| CliError::Usage(e.to_string()))?;
        let length = match parts.next() {
            Some(l) => l
                .parse()
                .map_err(|_| CliError::Usage(format!("bad synthetic length in '{arg}'")))?,
            None => DEFAULT_SYNTH_LEN,
        };
        return Ok(Source::Synth { kind, length });
    }
    let path = PathBuf::from(arg);
    if !path.is_file() {
        return Err(CliError::Core(Error::Data(format!("dataset file not found: {}", path.display()))));
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        Ok(Source::Prepared(path))
    } else {
        let format = Format::from_path(&path);
        Ok(Source::File { path, format })
    }
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Core(Error::io(path, e)))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn values_digest(values: &[Option<f64>]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.unwrap_or(f64::NAN).to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn load_raw(arg: &str, seed: u64) -> Result<(RawSeries, DatasetInfo), CliError> {
    match parse_source(arg)? {
        Source::File { path, format } => {
            let sha256 = file_digest(&path)?;
            let raw = load_series(&path, format)?;
            Ok((raw, DatasetInfo { source: arg.into(), sha256 }))
        }
        Source::Synth { kind, length } => {
            let raw = synth_series(kind, length, seed)?;
            let sha256 = values_digest(&raw.values);
            Ok((raw, DatasetInfo { source: format!("{arg} (seed {seed})"), sha256 }))
        }
        Source::Prepared(_) => Err(CliError::Usage(format!(
            "{arg} is already a prepared series; pass the raw file to prepare"
        ))),
    }
}

/// Prepared series from any dataset argument. A prepared JSON file is used
/// as is; the data flags then have no effect.
pub fn load_prepared(arg: &str, data: &DataConfig, seed: u64, min_split: usize) -> Result<(PreparedSeries, DatasetInfo), CliError> {
    if let Source::Prepared(path) = parse_source(arg)? {
        let sha256 = file_digest(&path)?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::Core(Error::io(&path, e)))?;
        let p: PreparedSeries = serde_json::from_str(&text)
            .map_err(|e| CliError::Core(Error::Data(format!("{}: not a prepared series: {e}", path.display()))))?;
        return Ok((p, DatasetInfo { source: arg.into(), sha256 }));
    }
    let (raw, info) = load_raw(arg, seed)?;
    let p = prepare_series(&raw, data.aggregate, data.ratios(), min_split)?;
    Ok((p, info))
}
