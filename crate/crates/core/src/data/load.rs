//! CSV and TSF ingestion.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Tsf,
}

impl Format {
    /// Guess from the file extension; anything but `.tsf` is read as CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tsf") => Format::Tsf,
            _ => Format::Csv,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Tsf => "tsf",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "tsf" => Ok(Format::Tsf),
            other => Err(Error::Config(format!("unknown format '{other}' (expected csv or tsf)"))),
        }
    }
}

/// A series as read from disk. `None` marks a missing observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub name: String,
    /// Strictly increasing. Seconds since the epoch for calendar stamps,
    /// the raw number for numeric stamps, the row index when absent.
    pub timestamps: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub native_resolution: Option<String>,
}

impl RawSeries {
    /// Complete series with index timestamps.
    pub fn from_values(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            timestamps: (0..values.len()).map(|i| i as f64).collect(),
            values: values.into_iter().map(Some).collect(),
            native_resolution: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp() as f64);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M:%S", "%Y-%m-%d %H-%M-%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp() as f64);
        }
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp() as f64);
        }
    }
    None
}

fn parse_value(s: &str, missing: &[&str]) -> std::result::Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() || missing.contains(&s) {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(v) => Err(format!("non-finite value {v}")),
        Err(_) => Err(format!("cannot parse value '{s}'")),
    }
}

fn series_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("series").to_string()
}

/// Read a series. CSV: optional header, columns `(timestamp, value)` or a
/// single value column; an empty value field is missing. TSF: the first
/// series after `@data`; `?` is missing.
pub fn load_series(path: &Path, format: Format) -> Result<RawSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Csv => parse_csv(&text, path),
        Format::Tsf => parse_tsf(&text, path),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

/// Parse CSV text; `path` is only used in error messages.
pub fn parse_csv(text: &str, path: &Path) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let (ts, val) = match record.len() {
            1 => (None, &record[0]),
            2 => (Some(&record[0]), &record[1]),
            n => return Err(parse_err(path, line, format!("expected 1 or 2 columns, found {n}"))),
        };
        let parsed_ts = ts.map(parse_timestamp);
        let parsed_val = parse_value(val, &[]);
        if first {
            first = false;
            let header = matches!(parsed_ts, Some(None)) || (parsed_val.is_err() && !val.is_empty());
            if header {
                continue;
            }
        }
        let v = parsed_val.map_err(|m| parse_err(path, line, m))?;
        let t = match parsed_ts {
            None => values.len() as f64,
            Some(Some(t)) => t,
            Some(None) => {
                return Err(parse_err(path, line, format!("cannot parse timestamp '{}'", ts.unwrap_or(""))))
            }
        };
        if let Some(&prev) = timestamps.last() {
            if t <= prev {
                return Err(parse_err(path, line, format!("timestamp {t} does not increase (previous {prev})")));
            }
        }
        timestamps.push(t);
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(RawSeries {
        name: series_name(path),
        timestamps,
        values,
        native_resolution: None,
    })
}

/// Parse Monash-style TSF text; `path` is only used in error messages.
pub fn parse_tsf(text: &str, path: &Path) -> Result<RawSeries> {
    let mut frequency = None;
    let mut in_data = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let lower = line.to_ascii_lowercase();
            if let Some(rest) = lower.strip_prefix("@frequency") {
                frequency = Some(rest.trim().to_string());
            } else if lower.starts_with("@data") {
                in_data = true;
            } else if !line.starts_with('@') {
                return Err(parse_err(path, line_no, "data line before @data"));
            }
            continue;
        }
        let (head, body) = match line.rfind(':') {
            Some(p) => (&line[..p], &line[p + 1..]),
            None => ("", line),
        };
        let values = body
            .split(',')
            .map(|v| parse_value(v, &["?"]).map_err(|m| parse_err(path, line_no, m)))
            .collect::<Result<Vec<_>>>()?;
        let name = head.split(':').next().filter(|s| !s.is_empty()).map_or_else(|| series_name(path), str::to_string);
        return Ok(RawSeries {
            name,
            timestamps: (0..values.len()).map(|i| i as f64).collect(),
            values,
            native_resolution: frequency,
        });
    }
    Err(Error::Data(format!("{}: no series found after @data", path.display())))
}
