//! Daily scalar series (rain, temperature, flow) with explicit missing flags.

use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    RainMm,
    TempCelsius,
    FlowM3s,
}

/// A daily series starting at `start_date`. Missing entries hold 0.0 in
/// `values` and `true` in `missing`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub start_date: NaiveDate,
    pub kind: SeriesKind,
    values: Vec<f64>,
    missing: Vec<bool>,
    norm_max: Option<f64>,
}

impl TimeSeries {
    pub fn new(start_date: NaiveDate, kind: SeriesKind, values: Vec<Option<f64>>) -> Self {
        let missing = values.iter().map(Option::is_none).collect();
        let values = values.into_iter().map(|v| v.unwrap_or(0.0)).collect();
        Self {
            start_date,
            kind,
            values,
            missing,
            norm_max: None,
        }
    }

    pub fn complete(start_date: NaiveDate, kind: SeriesKind, values: Vec<f64>) -> Self {
        let missing = vec![false; values.len()];
        Self {
            start_date,
            kind,
            values,
            missing,
            norm_max: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn norm_max(&self) -> Option<f64> {
        self.norm_max
    }

    /// Measured value at day index `t`, `None` when missing or out of range.
    pub fn get(&self, t: usize) -> Option<f64> {
        match self.missing.get(t) {
            Some(false) => Some(self.values[t]),
            _ => None,
        }
    }

    pub fn is_measured(&self, t: usize) -> bool {
        self.get(t).is_some()
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|m| **m).count()
    }

    pub fn end_date(&self) -> NaiveDate {
        date_at(self.start_date, self.len().saturating_sub(1))
    }

    pub fn date_at(&self, t: usize) -> NaiveDate {
        date_at(self.start_date, t)
    }

    /// Day index of `date` relative to this series' start (may be out of range).
    pub fn offset_of(&self, date: NaiveDate) -> i64 {
        (date - self.start_date).num_days()
    }

    /// Re-expresses the series on the window `[start, start + len)`; days
    /// outside the original coverage become missing.
    pub fn reindex(&self, start: NaiveDate, len: usize) -> TimeSeries {
        let shift = self.offset_of(start);
        let values = (0..len)
            .map(|i| {
                let src = shift + i as i64;
                if src < 0 {
                    None
                } else {
                    self.get(src as usize)
                }
            })
            .collect();
        let mut out = TimeSeries::new(start, self.kind, values);
        out.norm_max = self.norm_max;
        out
    }

    /// Subtracts `offset` from every measured value.
    pub fn shifted(&self, offset: f64) -> TimeSeries {
        let mut out = self.clone();
        for (v, m) in out.values.iter_mut().zip(&out.missing) {
            if !m {
                *v -= offset;
            }
        }
        out
    }

    pub fn measured_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.missing)
            .filter(|(_, m)| !**m)
            .map(|(v, _)| *v)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["date", "value"])
            .map_err(|e| csv_err(path, e))?;
        for t in 0..self.len() {
            let date = self.date_at(t).format("%Y-%m-%d").to_string();
            let value = self.get(t).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([date, value])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

fn date_at(start: NaiveDate, t: usize) -> NaiveDate {
    start
        .checked_add_days(Days::new(t as u64))
        .expect("date overflow")
}

/// A flow measurement station on a location's shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Gauge {
    pub site_id: String,
    pub pixel: (usize, usize),
    pub flow: TimeSeries,
}

/// Parses a `date,value` CSV. Calendar days absent from the file and empty
/// value fields become missing entries.
pub fn parse_series(path: &Path, kind: SeriesKind) -> Result<TimeSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_series_str(&text, kind).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_series_str(text: &str, kind: SeriesKind) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "date" || &headers[1] != "value" {
        return Err(Error::Parse(format!(
            "expected header `date,value`, got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows: Vec<(NaiveDate, Option<f64>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| {
            Error::Parse(format!("row {}: bad date {:?}: {e}", line + 2, &record[0]))
        })?;
        let value = match &record[1] {
            "" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| {
                    Error::Parse(format!("row {}: non-numeric value {s:?}", line + 2))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!("row {}: non-finite value", line + 2)));
                }
                Some(v)
            }
        };
        if let Some((prev, _)) = rows.last() {
            if date <= *prev {
                return Err(Error::Parse(format!(
                    "row {}: date {date} is not after {prev} (unordered or duplicate)",
                    line + 2
                )));
            }
        }
        rows.push((date, value));
    }
    let Some(&(start, _)) = rows.first() else {
        return Err(Error::Parse("series has no rows".into()));
    };
    let end = rows.last().unwrap().0;
    let len = (end - start).num_days() as usize + 1;
    let mut values = vec![None; len];
    for (date, v) in rows {
        values[(date - start).num_days() as usize] = v;
    }
    Ok(TimeSeries::new(start, kind, values))
}

/// Fills input-series gaps: linear between the nearest measured neighbours
/// inside the series, nearest-value extension at either end.
pub fn interpolate_gaps(series: &TimeSeries) -> Result<TimeSeries> {
    if series.kind == SeriesKind::FlowM3s {
        return Err(Error::InvalidArgument(
            "flow series are regression targets and must not be interpolated".into(),
        ));
    }
    Ok(fill_gaps(series)?)
}

/// Gap filling without the target-series guard; used for flow values that
/// are fed to the model as inputs, never for targets.
pub(crate) fn fill_gaps(series: &TimeSeries) -> Result<TimeSeries> {
    let known: Vec<usize> = (0..series.len()).filter(|&t| !series.missing[t]).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err(Error::NoData("every value of the series is missing".into()));
    };
    let mut values = series.values.clone();
    for v in &mut values[..first] {
        *v = series.values[first];
    }
    for v in &mut values[last + 1..] {
        *v = series.values[last];
    }
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (series.values[a], series.values[b]);
        let span = (b - a) as f64;
        for t in a + 1..b {
            let frac = (t - a) as f64 / span;
            values[t] = va + (vb - va) * frac;
        }
    }
    Ok(TimeSeries {
        start_date: series.start_date,
        kind: series.kind,
        missing: vec![false; values.len()],
        values,
        norm_max: series.norm_max,
    })
}

/// Divides measured values by `max_value` and records it.
pub fn normalize_series(series: &TimeSeries, max_value: f64) -> Result<TimeSeries> {
    if !(max_value > 0.0) || !max_value.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "normalization maximum must be positive, got {max_value}"
        )));
    }
    let mut out = series.clone();
    for (v, m) in out.values.iter_mut().zip(&out.missing) {
        if !m {
            *v /= max_value;
        }
    }
    out.norm_max = Some(max_value);
    Ok(out)
}

/// The `history` values preceding day `t`, oldest first.
pub fn slice_history(series: &TimeSeries, t: usize, history: usize) -> Result<Vec<f64>> {
    if history > t {
        return Err(Error::InsufficientHistory(format!(
            "day {t} has fewer than {history} preceding days"
        )));
    }
    if t > series.len() {
        return Err(Error::OutOfBounds(format!(
            "day {t} beyond series of length {}",
            series.len()
        )));
    }
    (t - history..t)
        .map(|i| {
            series
                .get(i)
                .ok_or_else(|| Error::NoData(format!("missing value at day {i} in history")))
        })
        .collect()
}
