//! Training and evaluation samples: window selection around gauges, input
//! tensor assembly for every model variant, and flip augmentation.

use std::ops::RangeInclusive;

use ndarray::{s, Array1, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::location::PreparedLocation;
use crate::raster::{crop_window, LayerName, RasterStack};

/// How the temporal inputs reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Rain and temperature histories tiled into constant channels.
    Main,
    /// One channel per day, rain and temperature interleaved on a checkerboard.
    AltRainTemp,
    /// Temporal vector through two dense layers, injected at the input.
    FcEarly,
    /// Temporal vector through two dense layers, injected after the second block.
    FcMid,
    /// Main plus `k`-day-lagged flow history as extra tiled channels.
    FlowLag(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyMode {
    pub variant: Variant,
    #[serde(rename = "T")]
    pub history: usize,
    pub include_layers: Vec<LayerName>,
    pub include_rain: bool,
    pub include_temp: bool,
}

impl Default for AssemblyMode {
    fn default() -> Self {
        Self {
            variant: Variant::Main,
            history: 20,
            include_layers: LayerName::ALL.to_vec(),
            include_rain: true,
            include_temp: true,
        }
    }
}

impl AssemblyMode {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::Config("history length T must be positive".into()));
        }
        if let Variant::FlowLag(k) = self.variant {
            if !(1..=3).contains(&k) {
                return Err(Error::Config(format!(
                    "flow lag must be 1, 2 or 3, got {k}"
                )));
            }
        }
        if self.variant == Variant::AltRainTemp && !(self.include_rain && self.include_temp) {
            return Err(Error::Config(
                "the checkerboard encoding needs both rain and temperature".into(),
            ));
        }
        let mut seen = self.include_layers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.include_layers.len() {
            return Err(Error::Config("include_layers lists a layer twice".into()));
        }
        if self.input_channels() == 0 {
            return Err(Error::Config("assembly produces no input channels".into()));
        }
        Ok(())
    }

    /// Included layers in canonical order.
    pub fn layers(&self) -> Vec<LayerName> {
        LayerName::ALL
            .iter()
            .copied()
            .filter(|l| self.include_layers.contains(l))
            .collect()
    }

    pub fn spatial_channels(&self) -> usize {
        self.include_layers.len()
    }

    fn weather_series(&self) -> usize {
        usize::from(self.include_rain) + usize::from(self.include_temp)
    }

    /// Channel count K of the assembled input tensor.
    pub fn input_channels(&self) -> usize {
        let c = self.spatial_channels();
        let t = self.history;
        match self.variant {
            Variant::Main => c + self.weather_series() * t,
            Variant::AltRainTemp => c + t,
            Variant::FcEarly | Variant::FcMid => c,
            Variant::FlowLag(_) => c + (self.weather_series() + 1) * t,
        }
    }

    /// Length of the temporal side vector for the dense-fusion variants.
    pub fn temporal_vector_len(&self) -> usize {
        match self.variant {
            Variant::FcEarly | Variant::FcMid => self.weather_series() * self.history,
            _ => 0,
        }
    }

    /// Earliest day index with a complete input history.
    pub fn min_day(&self) -> usize {
        match self.variant {
            Variant::FlowLag(k) => self.history + usize::from(k) - 1,
            _ => self.history,
        }
    }

    pub fn flow_lag(&self) -> Option<usize> {
        match self.variant {
            Variant::FlowLag(k) => Some(usize::from(k)),
            _ => None,
        }
    }
}

/// Temporal values behind one sample, oldest first, normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalInputs {
    pub rain: Vec<f32>,
    pub temp: Vec<f32>,
    pub flow: Option<Vec<f32>>,
}

impl TemporalInputs {
    /// Histories ending the day before `t`.
    pub fn at(loc: &PreparedLocation, gauge: usize, t: usize, mode: &AssemblyMode) -> Result<Self> {
        let history = mode.history;
        if t < mode.min_day() {
            return Err(Error::InsufficientHistory(format!(
                "day {t} needs at least {} preceding days",
                mode.min_day()
            )));
        }
        if t > loc.n_days() {
            return Err(Error::OutOfBounds(format!(
                "day {t} beyond the {}-day timeline of {}",
                loc.n_days(),
                loc.name
            )));
        }
        let flow = match mode.flow_lag() {
            Some(k) => {
                let series = loc.gauges[gauge].flow_input.as_ref().ok_or_else(|| {
                    Error::NoData(format!(
                        "gauge {} has no flow to use as input",
                        loc.gauges[gauge].site_id
                    ))
                })?;
                let end = t + 1 - k;
                Some(series[end - history..end].to_vec())
            }
            None => None,
        };
        Ok(Self {
            rain: loc.rain[t - history..t].to_vec(),
            temp: loc.temp[t - history..t].to_vec(),
            flow,
        })
    }
}

/// A supervised pixel: raw flow in m³/s and the divisor of the normalized scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub pixel: (usize, usize),
    pub flow: f64,
    pub norm_max: f64,
}

impl Target {
    pub fn normalized(&self) -> f64 {
        self.flow / self.norm_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub location: String,
    pub origin: (usize, usize),
    pub day: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// K×H×W input tensor.
    pub input: Array3<f32>,
    /// Temporal side vector for the dense-fusion variants.
    pub temporal: Option<Array1<f32>>,
    pub targets: Vec<Target>,
    pub meta: SampleMeta,
    pub mode: AssemblyMode,
    pub history: TemporalInputs,
}

/// Origins of every `h`×`w` window inside `full` that contains `gauge`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowOrigins {
    pub rows: RangeInclusive<usize>,
    pub cols: RangeInclusive<usize>,
}

impl WindowOrigins {
    pub fn count(&self) -> usize {
        self.rows.clone().count() * self.cols.clone().count()
    }

    pub fn contains(&self, origin: (usize, usize)) -> bool {
        self.rows.contains(&origin.0) && self.cols.contains(&origin.1)
    }
}

pub fn enumerate_window_origins(
    gauge: (usize, usize),
    h: usize,
    w: usize,
    full: (usize, usize),
) -> WindowOrigins {
    let axis = |p: usize, len: usize, n: usize| (p + 1).saturating_sub(len)..=p.min(n - len);
    WindowOrigins {
        rows: axis(gauge.0, h, full.0),
        cols: axis(gauge.1, w, full.1),
    }
}

/// Window origin centred on `pixel`, clipped to the grid.
pub fn centered_origin(
    pixel: (usize, usize),
    h: usize,
    w: usize,
    full: (usize, usize),
) -> (usize, usize) {
    let axis = |p: usize, len: usize, n: usize| p.saturating_sub(len / 2).min(n - len);
    (axis(pixel.0, h, full.0), axis(pixel.1, w, full.1))
}

/// Builds the K×H×W input (and the side vector for dense-fusion variants)
/// from a normalized window holding all ten layers.
pub fn assemble_input(
    window: &RasterStack,
    history: &TemporalInputs,
    mode: &AssemblyMode,
) -> Result<(Array3<f32>, Option<Array1<f32>>)> {
    mode.validate()?;
    let t = mode.history;
    if history.rain.len() != t || history.temp.len() != t {
        return Err(Error::InvalidArgument(format!(
            "history lengths ({}, {}) differ from T = {t}",
            history.rain.len(),
            history.temp.len()
        )));
    }
    let flow = match (mode.flow_lag(), &history.flow) {
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "flow history is required in flow-lag mode".into(),
            ))
        }
        (Some(_), Some(f)) if f.len() != t => {
            return Err(Error::InvalidArgument(format!(
                "flow history length {} differs from T = {t}",
                f.len()
            )))
        }
        (Some(_), Some(f)) => Some(f.as_slice()),
        (None, _) => None,
    };

    let (h, w) = (window.height(), window.width());
    let mut input = Array3::<f32>::zeros((mode.input_channels(), h, w));
    let layers = mode.layers();
    for (ch, name) in layers.iter().enumerate() {
        input
            .index_axis_mut(Axis(0), ch)
            .assign(&window.layer(*name).data);
    }
    let c = layers.len();
    fill_temporal_channels(&mut input, c, history, flow, mode);

    let temporal = match mode.variant {
        Variant::FcEarly | Variant::FcMid => {
            let mut v = Vec::with_capacity(mode.temporal_vector_len());
            if mode.include_rain {
                v.extend_from_slice(&history.rain);
            }
            if mode.include_temp {
                v.extend_from_slice(&history.temp);
            }
            Some(Array1::from(v))
        }
        _ => None,
    };
    Ok((input, temporal))
}

fn fill_temporal_channels(
    input: &mut Array3<f32>,
    first: usize,
    history: &TemporalInputs,
    flow: Option<&[f32]>,
    mode: &AssemblyMode,
) {
    let mut ch = first;
    let tile = |input: &mut Array3<f32>, values: &[f32], ch: &mut usize| {
        for &v in values {
            input.index_axis_mut(Axis(0), *ch).fill(v);
            *ch += 1;
        }
    };
    match mode.variant {
        Variant::Main | Variant::FlowLag(_) => {
            if mode.include_rain {
                tile(input, &history.rain, &mut ch);
            }
            if mode.include_temp {
                tile(input, &history.temp, &mut ch);
            }
            if let Some(f) = flow {
                tile(input, f, &mut ch);
            }
        }
        Variant::AltRainTemp => {
            for (j, (&r, &tau)) in history.rain.iter().zip(&history.temp).enumerate() {
                let mut plane = input.index_axis_mut(Axis(0), ch + j);
                for ((row, col), v) in plane.indexed_iter_mut() {
                    *v = if (row + col) % 2 == 0 { r } else { tau };
                }
            }
        }
        Variant::FcEarly | Variant::FcMid => {}
    }
}

/// Mirrors the sample's spatial content; `flip_h` mirrors columns and
/// `flip_v` mirrors rows. Temporal channels are rebuilt so the checkerboard
/// keeps rain on even-parity pixels.
pub fn apply_flips(sample: &Sample, flip_h: bool, flip_v: bool) -> Sample {
    let mut out = sample.clone();
    if !flip_h && !flip_v {
        return out;
    }
    let (_, h, w) = out.input.dim();
    let c = out.mode.spatial_channels();
    {
        let mut spatial = out.input.slice_mut(s![..c, .., ..]);
        let mut flipped = spatial.to_owned();
        if flip_h {
            flipped.invert_axis(Axis(2));
        }
        if flip_v {
            flipped.invert_axis(Axis(1));
        }
        spatial.assign(&flipped);
    }
    let flow = out.history.flow.clone();
    fill_temporal_channels(
        &mut out.input,
        c,
        &sample.history,
        flow.as_deref(),
        &sample.mode,
    );
    for t in &mut out.targets {
        if flip_h {
            t.pixel.1 = w - 1 - t.pixel.1;
        }
        if flip_v {
            t.pixel.0 = h - 1 - t.pixel.0;
        }
    }
    out.meta.flip_h ^= flip_h;
    out.meta.flip_v ^= flip_v;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub h: usize,
    pub w: usize,
    pub flip_prob: f64,
    pub mode: AssemblyMode,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        self.mode.validate()
    }
}

struct Anchor {
    gauge: usize,
    days: Vec<usize>,
}

/// Hierarchical random sampler: location, then gauge, then window, then day.
pub struct TrainingSampler<'a> {
    locations: &'a [PreparedLocation],
    anchors: Vec<Vec<Anchor>>,
    config: SamplerConfig,
}

impl<'a> TrainingSampler<'a> {
    pub fn new(locations: &'a [PreparedLocation], config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if locations.is_empty() {
            return Err(Error::NoData("no training locations".into()));
        }
        let min_day = config.mode.min_day();
        let mut anchors = Vec::with_capacity(locations.len());
        for loc in locations {
            if loc.stack.height() < config.h || loc.stack.width() < config.w {
                return Err(Error::Config(format!(
                    "{}x{} window does not fit the {}x{} grid of {}",
                    config.h,
                    config.w,
                    loc.stack.height(),
                    loc.stack.width(),
                    loc.name
                )));
            }
            let usable: Vec<Anchor> = (0..loc.gauges.len())
                .filter(|&g| config.mode.flow_lag().is_none() || loc.gauges[g].flow_input.is_some())
                .map(|g| Anchor {
                    gauge: g,
                    days: loc.supervised_days(g, min_day),
                })
                .filter(|a| !a.days.is_empty())
                .collect();
            if usable.is_empty() {
                return Err(Error::NoData(format!(
                    "location {} has no supervised day",
                    loc.name
                )));
            }
            anchors.push(usable);
        }
        Ok(Self {
            locations,
            anchors,
            config,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Sample> {
        let li = rng.random_range(0..self.locations.len());
        let loc = &self.locations[li];
        let anchor = &self.anchors[li][rng.random_range(0..self.anchors[li].len())];
        let (h, w) = (self.config.h, self.config.w);
        let origins = enumerate_window_origins(
            loc.gauges[anchor.gauge].pixel,
            h,
            w,
            (loc.stack.height(), loc.stack.width()),
        );
        let origin = (
            rng.random_range(origins.rows.clone()),
            rng.random_range(origins.cols.clone()),
        );
        let day = anchor.days[rng.random_range(0..anchor.days.len())];
        let flip_h = rng.random::<f64>() < self.config.flip_prob;
        let flip_v = rng.random::<f64>() < self.config.flip_prob;

        let targets = window_targets(loc, origin, h, w, day);
        let sample = build_sample(
            loc,
            anchor.gauge,
            origin,
            day,
            h,
            w,
            targets,
            &self.config.mode,
        )?;
        Ok(apply_flips(&sample, flip_h, flip_v))
    }
}

/// One-shot form of [`TrainingSampler::draw`].
pub fn draw_training_sample<R: Rng + ?Sized>(
    locations: &[PreparedLocation],
    rng: &mut R,
    config: &SamplerConfig,
) -> Result<Sample> {
    TrainingSampler::new(locations, config.clone())?.draw(rng)
}

/// Every gauge inside the window with a measurement on `day`.
fn window_targets(
    loc: &PreparedLocation,
    origin: (usize, usize),
    h: usize,
    w: usize,
    day: usize,
) -> Vec<Target> {
    loc.gauges
        .iter()
        .filter_map(|g| {
            let (r, c) = g.pixel;
            let inside = r >= origin.0 && r < origin.0 + h && c >= origin.1 && c < origin.1 + w;
            match (inside, g.flow.get(day)) {
                (true, Some(flow)) => Some(Target {
                    pixel: (r - origin.0, c - origin.1),
                    flow,
                    norm_max: loc.flow_max,
                }),
                _ => None,
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn build_sample(
    loc: &PreparedLocation,
    gauge: usize,
    origin: (usize, usize),
    day: usize,
    h: usize,
    w: usize,
    targets: Vec<Target>,
    mode: &AssemblyMode,
) -> Result<Sample> {
    let window = crop_window(&loc.stack, origin, h, w)?;
    let history = TemporalInputs::at(loc, gauge, day, mode)?;
    let (input, temporal) = assemble_input(&window, &history, mode)?;
    Ok(Sample {
        input,
        temporal,
        targets,
        meta: SampleMeta {
            location: loc.name.clone(),
            origin,
            day,
            flip_h: false,
            flip_v: false,
        },
        mode: mode.clone(),
        history,
    })
}

/// Deterministic evaluation sample: window centred on the gauge, no flips,
/// a single target at the gauge (which may be unmeasured on `day`).
pub fn eval_sample(
    loc: &PreparedLocation,
    gauge: usize,
    day: usize,
    h: usize,
    w: usize,
    mode: &AssemblyMode,
) -> Result<Sample> {
    let full = (loc.stack.height(), loc.stack.width());
    if full.0 < h || full.1 < w {
        return Err(Error::Config(format!(
            "{h}x{w} window does not fit the {}x{} grid of {}",
            full.0, full.1, loc.name
        )));
    }
    let g = &loc.gauges[gauge];
    let origin = centered_origin(g.pixel, h, w, full);
    let target = Target {
        pixel: (g.pixel.0 - origin.0, g.pixel.1 - origin.1),
        flow: g.flow.get(day).unwrap_or(f64::NAN),
        norm_max: loc.flow_max,
    };
    build_sample(loc, gauge, origin, day, h, w, vec![target], mode)
}

/// Window sample at an arbitrary origin, used for dense map export.
pub fn window_sample(
    loc: &PreparedLocation,
    gauge: usize,
    origin: (usize, usize),
    day: usize,
    h: usize,
    w: usize,
    mode: &AssemblyMode,
) -> Result<Sample> {
    let targets = window_targets(loc, origin, h, w, day);
    build_sample(loc, gauge, origin, day, h, w, targets, mode)
}
