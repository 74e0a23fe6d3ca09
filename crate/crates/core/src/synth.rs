//! Synthetic catchments driven by a linear-reservoir rainfall-runoff model.
//!
//! Each gauge drains a reservoir with storage `S`: effective input
//! `e_t = c * (liquid rain_t + melt_t)`, outflow `Q_t = k * S_t` and
//! `S_{t+1} = S_t + e_t - k * S_t` from `S_0 = 0`. On days colder than
//! `tau0` the rain is stored as snow; warm days release up to `melt_rate`
//! of it. The recession `k` and runoff coefficient `c` of a gauge are read
//! off the rasters around its pixel, so the flow depends on both the
//! weather history and the local terrain.

use chrono::NaiveDate;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::location::Location;
use crate::raster::{LayerName, RasterLayer, RasterStack, DEFAULT_CELL_SIZE_M};
use crate::timeseries::{Gauge, SeriesKind, TimeSeries};

/// Recession and runoff coefficients of one reservoir.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirParams {
    /// Fraction of storage released per day, in (0, 1).
    pub k: f64,
    /// Fraction of water input that reaches the reservoir, in (0, 1].
    pub c: f64,
    /// Below this temperature (°C) precipitation is stored as snow.
    pub tau0: f64,
    /// Snow released per warm day, in rain units.
    pub melt_rate: f64,
    /// Multiplier from depth units to m³/s.
    pub scale: f64,
}

impl ReservoirParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "k must lie in (0, 1), got {}",
                self.k
            )));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "c must lie in (0, 1], got {}",
                self.c
            )));
        }
        if !(self.melt_rate >= 0.0) || !(self.scale > 0.0) || !self.tau0.is_finite() {
            return Err(Error::InvalidArgument(
                "melt_rate must be non-negative, scale positive and tau0 finite".into(),
            ));
        }
        Ok(())
    }
}

/// Full trajectory of a reservoir run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirRun {
    pub flow: Vec<f64>,
    /// Storage after the last update, `S_N`.
    pub final_storage: f64,
    /// Effective inputs `e_t`.
    pub inputs: Vec<f64>,
    /// Snow left at the end.
    pub final_snow: f64,
}

/// Runs the reservoir and returns the full trajectory.
pub fn run_reservoir(rain: &[f64], temp: &[f64], p: &ReservoirParams) -> Result<ReservoirRun> {
    if rain.len() != temp.len() {
        return Err(Error::DimensionMismatch(format!(
            "rain has {} days, temperature {}",
            rain.len(),
            temp.len()
        )));
    }
    p.validate()?;
    let mut storage = 0.0;
    let mut snow = 0.0;
    let mut flow = Vec::with_capacity(rain.len());
    let mut inputs = Vec::with_capacity(rain.len());
    for (&r, &t) in rain.iter().zip(temp) {
        let water = if t < p.tau0 {
            snow += r;
            0.0
        } else {
            let melt = snow.min(p.melt_rate);
            snow -= melt;
            r + melt
        };
        let e = p.c * water;
        let q = p.k * storage;
        flow.push(q * p.scale);
        inputs.push(e);
        storage = storage + e - q;
    }
    Ok(ReservoirRun {
        flow,
        final_storage: storage,
        inputs,
        final_snow: snow,
    })
}

/// Daily outflow of the reservoir in m³/s.
pub fn simulate_flow(rain: &[f64], temp: &[f64], p: &ReservoirParams) -> Result<Vec<f64>> {
    run_reservoir(rain, temp, p).map(|r| r.flow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub n_days: usize,
    pub n_gauges: usize,
    /// History length the dataset must support; `n_days` has to exceed it.
    pub history: usize,
    pub start_date: NaiveDate,
    pub k_range: (f64, f64),
    pub c_range: (f64, f64),
    pub tau0: f64,
    pub melt_rate: f64,
    pub flow_scale: f64,
    pub rain_prob: f64,
    pub rain_mean_mm: f64,
    pub temp_mean: f64,
    pub temp_amplitude: f64,
    pub temp_noise: f64,
    /// Fraction of flow days blanked out after simulation.
    pub missing_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            name: "synth_00".into(),
            height: 64,
            width: 64,
            seed: 0,
            n_days: 400,
            n_gauges: 2,
            history: 20,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            k_range: (0.25, 0.6),
            c_range: (0.3, 0.9),
            tau0: 0.0,
            melt_rate: 4.0,
            flow_scale: 1.0,
            rain_prob: 0.35,
            rain_mean_mm: 6.0,
            temp_mean: 5.0,
            temp_amplitude: 10.0,
            temp_noise: 2.0,
            missing_fraction: 0.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::InvalidArgument(format!(
                "synthetic grid {}x{} is too small",
                self.height, self.width
            )));
        }
        if self.n_gauges == 0 {
            return Err(Error::InvalidArgument(
                "at least one gauge is required".into(),
            ));
        }
        if self.n_days <= self.history {
            return Err(Error::InvalidArgument(format!(
                "n_days ({}) must exceed the history length ({})",
                self.n_days, self.history
            )));
        }
        let (k0, k1) = self.k_range;
        let (c0, c1) = self.c_range;
        if !(0.0 < k0 && k0 <= k1 && k1 < 1.0) || !(0.0 < c0 && c0 <= c1 && c1 <= 1.0) {
            return Err(Error::InvalidArgument(
                "k range must lie in (0, 1) and c range in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rain_prob)
            || !(self.rain_mean_mm > 0.0)
            || !(0.0..1.0).contains(&self.missing_fraction)
        {
            return Err(Error::InvalidArgument(
                "invalid rain or missingness parameters".into(),
            ));
        }
        Ok(())
    }
}

/// Smooth value noise in [0, 1]: random lattice values at spacing `cell`,
/// bilinearly interpolated, summed over three octaves.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((h, w));
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut spacing = cell;
    for _ in 0..3 {
        let gh = (h as f64 / spacing).ceil() as usize + 2;
        let gw = (w as f64 / spacing).ceil() as usize + 2;
        let lattice = Array2::from_shape_fn((gh, gw), |_| rng.random::<f64>());
        for ((r, c), v) in out.indexed_iter_mut() {
            let y = r as f64 / spacing;
            let x = c as f64 / spacing;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let top = lattice[(y0, x0)] * (1.0 - fx) + lattice[(y0, x0 + 1)] * fx;
            let bottom = lattice[(y0 + 1, x0)] * (1.0 - fx) + lattice[(y0 + 1, x0 + 1)] * fx;
            *v += amp * (top * (1.0 - fy) + bottom * fy);
        }
        total += amp;
        amp *= 0.5;
        spacing = (spacing / 2.0).max(1.0);
    }
    out / total
}

/// Gradient magnitude by differences between adjacent cells (forward, or
/// backward on the last row/column), as rise over run.
pub fn slope_from_elevation(elevation: &Array2<f32>, cell_size_m: f64) -> Array2<f32> {
    let (h, w) = elevation.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let e = elevation[(r, c)] as f64;
        let dy = if h < 2 {
            0.0
        } else if r + 1 < h {
            elevation[(r + 1, c)] as f64 - e
        } else {
            e - elevation[(r - 1, c)] as f64
        };
        let dx = if w < 2 {
            0.0
        } else if c + 1 < w {
            elevation[(r, c + 1)] as f64 - e
        } else {
            e - elevation[(r, c - 1)] as f64
        };
        ((dx * dx + dy * dy).sqrt() / cell_size_m) as f32
    })
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

fn categorical(noise: &Array2<f64>, classes: usize) -> Array2<f64> {
    noise.mapv(|v| ((v * classes as f64).floor().min(classes as f64 - 1.0)) + 1.0)
}

fn synth_stack(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<RasterStack> {
    let side = h.min(w) as f64;
    let base = value_noise(rng, h, w, (side / 3.0).max(2.0));
    let elevation = base.mapv(|v| 40.0 + 360.0 * v);
    let elevation32 = to_f32(&elevation);
    let slope = slope_from_elevation(&elevation32, DEFAULT_CELL_SIZE_M);

    let cover_noise = value_noise(rng, h, w, (side / 4.0).max(2.0));
    let land_cover = categorical(&cover_noise, 5);
    let soil_noise = value_noise(rng, h, w, (side / 3.0).max(2.0));
    let soil_type = categorical(&soil_noise, 4);
    let depth_noise = value_noise(rng, h, w, (side / 4.0).max(2.0));
    let soil_depth = &depth_noise * 2.0 + 0.2;
    let conductivity = (&soil_type / 4.0) * 0.7 + &depth_noise * 0.3;
    let moisture_noise = value_noise(rng, h, w, (side / 6.0).max(2.0));
    let soil_moisture = (1.0 - &base) * 0.6 + moisture_noise * 0.4;

    const PALETTE: [[f64; 3]; 5] = [
        [0.10, 0.35, 0.12],
        [0.25, 0.50, 0.20],
        [0.55, 0.50, 0.30],
        [0.15, 0.25, 0.55],
        [0.60, 0.60, 0.58],
    ];
    let jitter = Normal::new(0.0, 0.03).unwrap();
    let mut bands = [
        Array2::<f64>::zeros((h, w)),
        Array2::<f64>::zeros((h, w)),
        Array2::<f64>::zeros((h, w)),
    ];
    for ((r, c), &class) in land_cover.indexed_iter() {
        let colour = PALETTE[class as usize - 1];
        for (band, &v) in bands.iter_mut().zip(&colour) {
            band[(r, c)] = (v + jitter.sample(rng)).clamp(0.0, 1.0) * 255.0;
        }
    }
    let [red, green, blue] = bands;

    let layers = LayerName::ALL
        .iter()
        .map(|&name| {
            let data = match name {
                LayerName::SatelliteR => to_f32(&red),
                LayerName::SatelliteG => to_f32(&green),
                LayerName::SatelliteB => to_f32(&blue),
                LayerName::Elevation => elevation32.clone(),
                LayerName::Slope => slope.clone(),
                LayerName::SoilMoisture => to_f32(&soil_moisture),
                LayerName::LandCover => to_f32(&land_cover),
                LayerName::SoilType => to_f32(&soil_type),
                LayerName::SoilDepth => to_f32(&soil_depth),
                LayerName::HydraulicConductivity => to_f32(&conductivity),
            };
            RasterLayer { name, data }
        })
        .collect();
    RasterStack::new(layers, DEFAULT_CELL_SIZE_M)
}

fn neighbourhood_mean(a: &Array2<f32>, (r, c): (usize, usize)) -> f64 {
    let (h, w) = a.dim();
    let rows = r.saturating_sub(1)..(r + 2).min(h);
    let cols = c.saturating_sub(1)..(c + 2).min(w);
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in rows {
        for j in cols.clone() {
            sum += a[(i, j)] as f64;
            n += 1.0;
        }
    }
    sum / n
}

/// Reservoir coefficients of a gauge: steeper terrain drains faster,
/// more conductive soil lets less water run off.
pub fn gauge_reservoir(
    stack: &RasterStack,
    pixel: (usize, usize),
    params: &SynthParams,
) -> ReservoirParams {
    let slope = neighbourhood_mean(&stack.layer(LayerName::Slope).data, pixel);
    let conductivity =
        neighbourhood_mean(&stack.layer(LayerName::HydraulicConductivity).data, pixel);
    let (k0, k1) = params.k_range;
    let (c0, c1) = params.c_range;
    let s = (slope / 2.0).clamp(0.0, 1.0);
    let q = conductivity.clamp(0.0, 1.0);
    ReservoirParams {
        k: k0 + (k1 - k0) * s,
        c: c1 - (c1 - c0) * q,
        tau0: params.tau0,
        melt_rate: params.melt_rate,
        scale: params.flow_scale,
    }
}

/// Daily rain (mm) and temperature (°C).
pub fn synth_weather(params: &SynthParams, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let intensity = Exp::new(1.0 / params.rain_mean_mm).unwrap();
    let noise = Normal::new(0.0, params.temp_noise.max(0.0)).unwrap();
    let phase = rng.random_range(-15.0..15.0);
    let mut rain = Vec::with_capacity(params.n_days);
    let mut temp = Vec::with_capacity(params.n_days);
    for t in 0..params.n_days {
        let wet = rng.random::<f64>() < params.rain_prob;
        let amount = intensity.sample(rng);
        rain.push(if wet {
            (amount * 10.0).round() / 10.0
        } else {
            0.0
        });
        let date = params.start_date + chrono::Days::new(t as u64);
        let doy = chrono::Datelike::ordinal0(&date) as f64;
        let season = (2.0 * std::f64::consts::PI * (doy - 110.0 + phase) / 365.25).sin();
        let t_c = params.temp_mean + params.temp_amplitude * season + noise.sample(rng);
        temp.push((t_c * 10.0).round() / 10.0);
    }
    (rain, temp)
}

/// Generated location together with the reservoir behind every gauge.
#[derive(Debug, Clone)]
pub struct SynthLocation {
    pub location: Location,
    pub reservoirs: Vec<ReservoirParams>,
}

pub fn generate_location(params: &SynthParams) -> Result<SynthLocation> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let stack = synth_stack(&mut rng, params.height, params.width)?;
    let (rain, temp) = synth_weather(params, &mut rng);

    let mut gauges = Vec::with_capacity(params.n_gauges);
    let mut reservoirs = Vec::with_capacity(params.n_gauges);
    for g in 0..params.n_gauges {
        let pixel = loop {
            let p = (
                rng.random_range(1..params.height - 1),
                rng.random_range(1..params.width - 1),
            );
            if gauges.iter().all(|other: &Gauge| other.pixel != p) {
                break p;
            }
        };
        let res = gauge_reservoir(&stack, pixel, params);
        let flow = simulate_flow(&rain, &temp, &res)?;
        let values = flow
            .into_iter()
            .map(|q| {
                let q = (q * 1e4).round() / 1e4;
                (rng.random::<f64>() >= params.missing_fraction).then_some(q)
            })
            .collect();
        gauges.push(Gauge {
            site_id: format!("{}_g{g}", params.name),
            pixel,
            flow: TimeSeries::new(params.start_date, SeriesKind::FlowM3s, values),
        });
        reservoirs.push(res);
    }
    let location = Location::new(
        params.name.clone(),
        stack,
        TimeSeries::complete(params.start_date, SeriesKind::RainMm, rain),
        TimeSeries::complete(params.start_date, SeriesKind::TempCelsius, temp),
        gauges,
    )?;
    Ok(SynthLocation {
        location,
        reservoirs,
    })
}
