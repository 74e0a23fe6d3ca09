//! Catchment locations on disk, dataset splits, and the normalization that
//! turns raw locations into model-ready arrays.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    compute_layer_maxima, normalize_stack, read_json, write_json, LayerMaxima, RasterStack,
};
use crate::timeseries::{
    fill_gaps, interpolate_gaps, normalize_series, parse_series, Gauge, SeriesKind, TimeSeries,
};

pub const MANIFEST_FILE: &str = "location.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeEntry {
    pub site_id: String,
    pub row: usize,
    pub col: usize,
    pub flow: String,
}

/// `location.json`: paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationManifest {
    pub name: String,
    pub rasters: String,
    pub rain: String,
    pub temp: String,
    pub gauges: Vec<GaugeEntry>,
}

/// One catchment: aligned rasters, shared weather series and its gauges.
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub name: String,
    pub stack: RasterStack,
    pub rain: TimeSeries,
    pub temp: TimeSeries,
    pub gauges: Vec<Gauge>,
}

impl Location {
    pub fn new(
        name: impl Into<String>,
        stack: RasterStack,
        rain: TimeSeries,
        temp: TimeSeries,
        gauges: Vec<Gauge>,
    ) -> Result<Self> {
        let name = name.into();
        if rain.kind != SeriesKind::RainMm || temp.kind != SeriesKind::TempCelsius {
            return Err(Error::InvalidArgument(format!(
                "location {name}: weather series have the wrong kinds"
            )));
        }
        for g in &gauges {
            if g.flow.kind != SeriesKind::FlowM3s {
                return Err(Error::InvalidArgument(format!(
                    "gauge {} does not carry a flow series",
                    g.site_id
                )));
            }
            if g.pixel.0 >= stack.height() || g.pixel.1 >= stack.width() {
                return Err(Error::OutOfBounds(format!(
                    "gauge {} at {:?} outside {}x{} grid of {name}",
                    g.site_id,
                    g.pixel,
                    stack.height(),
                    stack.width()
                )));
            }
        }
        Ok(Self {
            name,
            stack,
            rain,
            temp,
            gauges,
        })
    }

    /// Loads from a location directory or a path to its `location.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest: LocationManifest = read_json(&manifest_path)?;
        let stack = RasterStack::load(&base.join(&manifest.rasters))?;
        let rain = parse_series(&base.join(&manifest.rain), SeriesKind::RainMm)?;
        let temp = parse_series(&base.join(&manifest.temp), SeriesKind::TempCelsius)?;
        let gauges = manifest
            .gauges
            .iter()
            .map(|g| {
                Ok(Gauge {
                    site_id: g.site_id.clone(),
                    pixel: (g.row, g.col),
                    flow: parse_series(&base.join(&g.flow), SeriesKind::FlowM3s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Location::new(manifest.name, stack, rain, temp, gauges)
    }

    /// Writes the location in the layout [`Location::load`] reads.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("flows")).map_err(|e| Error::io(dir, e))?;
        self.stack.save(&dir.join("rasters"))?;
        self.rain.save_csv(&dir.join("rain.csv"))?;
        self.temp.save_csv(&dir.join("temp.csv"))?;
        let mut gauges = Vec::with_capacity(self.gauges.len());
        for g in &self.gauges {
            let rel = format!("flows/{}.csv", g.site_id);
            g.flow.save_csv(&dir.join(&rel))?;
            gauges.push(GaugeEntry {
                site_id: g.site_id.clone(),
                row: g.pixel.0,
                col: g.pixel.1,
                flow: rel,
            });
        }
        let manifest = LocationManifest {
            name: self.name.clone(),
            rasters: "rasters".into(),
            rain: "rain.csv".into(),
            temp: "temp.csv".into(),
            gauges,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)
    }
}

/// Named train/validation partition of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Split {
    pub fn load(path: &Path) -> Result<Self> {
        let split: Split = read_json(path)?;
        if split.train.is_empty() {
            return Err(Error::Config(format!(
                "{}: empty train split",
                path.display()
            )));
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// The 9/3 partition of the twelve Swedish catchments.
    pub fn reference() -> Self {
        serde_json::from_str(include_str!("../splits/paper.json")).expect("bundled split")
    }
}

pub fn location_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

pub fn load_locations(root: &Path, names: &[String]) -> Result<Vec<Location>> {
    names
        .iter()
        .map(|n| Location::load(&location_dir(root, n)))
        .collect()
}

/// Which locations contribute to the normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaximaScope {
    /// Every location available at preprocessing time.
    All,
    /// Training locations only.
    Train,
}

/// Constants mapping raw spatial and temporal values into [0, 1].
/// Temperature is shifted by `temp_min` before dividing by `temp_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub layer_maxima: LayerMaxima,
    pub rain_max: f64,
    pub temp_min: f64,
    pub temp_scale: f64,
    pub flow_max: f64,
}

fn positive_or_one(v: f64) -> f64 {
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

impl Normalization {
    pub fn fit(locations: &[&Location]) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::NoData("no locations to normalize over".into()));
        }
        let stacks: Vec<&RasterStack> = locations.iter().map(|l| &l.stack).collect();
        let layer_maxima = compute_layer_maxima(&stacks)?;
        let temps = || locations.iter().flat_map(|l| l.temp.measured_values());
        let rain_max = locations
            .iter()
            .flat_map(|l| l.rain.measured_values())
            .fold(f64::NEG_INFINITY, f64::max);
        let temp_min = temps().fold(f64::INFINITY, f64::min);
        let temp_max = temps().fold(f64::NEG_INFINITY, f64::max);
        let flow_max = locations
            .iter()
            .flat_map(|l| l.gauges.iter().flat_map(|g| g.flow.measured_values()))
            .fold(f64::NEG_INFINITY, f64::max);
        if !temp_min.is_finite() {
            return Err(Error::NoData("no temperature measurements".into()));
        }
        Ok(Self {
            layer_maxima,
            rain_max: positive_or_one(rain_max),
            temp_min,
            temp_scale: positive_or_one(temp_max - temp_min),
            flow_max: positive_or_one(flow_max),
        })
    }

    pub fn normalize_flow(&self, flow: f64) -> f64 {
        flow / self.flow_max
    }

    pub fn denormalize_flow(&self, flow: f64) -> f64 {
        flow * self.flow_max
    }
}

#[derive(Debug, Clone)]
pub struct PreparedGauge {
    pub site_id: String,
    pub pixel: (usize, usize),
    /// Raw measured flow in m³/s on the location timeline, never interpolated.
    pub flow: TimeSeries,
    /// Gap-filled, normalized flow for use as a model input.
    pub flow_input: Option<Vec<f32>>,
}

/// A location on a single daily timeline with normalized inputs.
#[derive(Debug, Clone)]
pub struct PreparedLocation {
    pub name: String,
    pub stack: RasterStack,
    pub start_date: NaiveDate,
    pub rain: Vec<f32>,
    pub temp: Vec<f32>,
    pub gauges: Vec<PreparedGauge>,
    pub flow_max: f64,
}

impl PreparedLocation {
    /// The timeline is the overlap of the rain and temperature coverage.
    pub fn prepare(loc: &Location, norm: &Normalization) -> Result<Self> {
        let start = loc.rain.start_date.max(loc.temp.start_date);
        let end = loc.rain.end_date().min(loc.temp.end_date());
        if end < start {
            return Err(Error::NoData(format!(
                "location {}: rain and temperature series do not overlap",
                loc.name
            )));
        }
        let n_days = (end - start).num_days() as usize + 1;
        let rain = interpolate_gaps(&loc.rain)?.reindex(start, n_days);
        let rain = normalize_series(&rain, norm.rain_max)?;
        let temp = interpolate_gaps(&loc.temp)?
            .reindex(start, n_days)
            .shifted(norm.temp_min);
        let temp = normalize_series(&temp, norm.temp_scale)?;
        let gauges = loc
            .gauges
            .iter()
            .map(|g| {
                let flow = g.flow.reindex(start, n_days);
                let flow_input = if flow.missing_count() < flow.len() {
                    let filled = normalize_series(&fill_gaps(&flow)?, norm.flow_max)?;
                    Some(filled.values().iter().map(|&v| v as f32).collect())
                } else {
                    None
                };
                Ok(PreparedGauge {
                    site_id: g.site_id.clone(),
                    pixel: g.pixel,
                    flow,
                    flow_input,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: loc.name.clone(),
            stack: normalize_stack(&loc.stack, &norm.layer_maxima)?,
            start_date: start,
            rain: rain.values().iter().map(|&v| v as f32).collect(),
            temp: temp.values().iter().map(|&v| v as f32).collect(),
            gauges,
            flow_max: norm.flow_max,
        })
    }

    pub fn n_days(&self) -> usize {
        self.rain.len()
    }

    /// Days `t ≥ min_day` with a real flow measurement at the gauge.
    pub fn supervised_days(&self, gauge: usize, min_day: usize) -> Vec<usize> {
        let flow = &self.gauges[gauge].flow;
        (min_day..self.n_days())
            .filter(|&t| flow.is_measured(t))
            .collect()
    }
}

/// Fits normalization on the locations named by `scope` and prepares all of them.
pub fn prepare_split(
    train: &[Location],
    val: &[Location],
    scope: MaximaScope,
) -> Result<(Normalization, Vec<PreparedLocation>, Vec<PreparedLocation>)> {
    let fit_on: Vec<&Location> = match scope {
        MaximaScope::All => train.iter().chain(val).collect(),
        MaximaScope::Train => train.iter().collect(),
    };
    let norm = Normalization::fit(&fit_on)?;
    let prep = |locs: &[Location]| {
        locs.iter()
            .map(|l| PreparedLocation::prepare(l, &norm))
            .collect::<Result<Vec<_>>>()
    };
    let train_p = prep(train)?;
    let val_p = prep(val)?;
    Ok((norm, train_p, val_p))
}
