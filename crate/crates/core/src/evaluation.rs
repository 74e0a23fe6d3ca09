//! RMSE at gauge pixels, evaluation reports, ablation runs and dense map export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{mean_per_site, previous_flow, FitRange};
use crate::config::{ablation_preset, RunConfig};
use crate::error::{Error, Result};
use crate::location::{prepare_split, Location, PreparedLocation};
use crate::model::{Checkpoint, FlowMap, Model};
use crate::raster::{write_grid, write_json};
use crate::sampler::{eval_sample, window_sample, SamplerConfig};
use crate::training::{train, CheckpointMeta};

/// Root-mean-square error of paired lists.
pub fn rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} ground-truth values",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::NoData("rmse of an empty list".into()));
    }
    let mut sse = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let e = p - g;
        sse += e * e;
    }
    Ok((sse / preds.len() as f64).sqrt())
}

/// Anything that yields a flow in m³/s for a gauge on a day.
pub trait FlowPredictor: Sync {
    fn name(&self) -> &str;

    /// `None` when the predictor has no input for that day.
    fn predict(&self, loc: &PreparedLocation, gauge: usize, day: usize) -> Result<Option<f64>>;

    fn fit_range(&self) -> Option<FitRange> {
        None
    }
}

/// Reads the model output at the gauge pixel of a centred window.
pub struct ModelPredictor<'a> {
    model: &'a Model<f32>,
    sampler: SamplerConfig,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model<f32>, sampler: &SamplerConfig) -> Self {
        Self {
            model,
            sampler: sampler.clone(),
        }
    }
}

impl FlowPredictor for ModelPredictor<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn predict(&self, loc: &PreparedLocation, gauge: usize, day: usize) -> Result<Option<f64>> {
        let s = &self.sampler;
        let sample = eval_sample(loc, gauge, day, s.h, s.w, &s.mode)?;
        let temporal = sample.temporal.as_ref().map(|t| t.view());
        let out = self
            .model
            .predict(&sample.input.view(), temporal.as_ref())?;
        let target = &sample.targets[0];
        Ok(Some(out[target.pixel] as f64 * target.norm_max))
    }
}

pub struct MeanPerSitePredictor {
    means: BTreeMap<(String, usize), f64>,
    fit: FitRange,
}

impl MeanPerSitePredictor {
    pub fn fit(locations: &[PreparedLocation], fit: FitRange) -> Result<Self> {
        let mut means = BTreeMap::new();
        for loc in locations {
            for (i, g) in loc.gauges.iter().enumerate() {
                means.insert((loc.name.clone(), i), mean_per_site(&g.flow, fit)?);
            }
        }
        Ok(Self { means, fit })
    }
}

impl FlowPredictor for MeanPerSitePredictor {
    fn name(&self) -> &str {
        "mean-per-site"
    }

    fn predict(&self, loc: &PreparedLocation, gauge: usize, _day: usize) -> Result<Option<f64>> {
        self.means
            .get(&(loc.name.clone(), gauge))
            .copied()
            .map(Some)
            .ok_or_else(|| Error::NoData(format!("no fitted mean for {} gauge {gauge}", loc.name)))
    }

    fn fit_range(&self) -> Option<FitRange> {
        Some(self.fit)
    }
}

pub struct PreviousFlowPredictor;

impl FlowPredictor for PreviousFlowPredictor {
    fn name(&self) -> &str {
        "previous-flow"
    }

    fn predict(&self, loc: &PreparedLocation, gauge: usize, day: usize) -> Result<Option<f64>> {
        Ok(previous_flow(&loc.gauges[gauge].flow, day))
    }
}

/// Returns the measurement itself.
pub struct OraclePredictor;

impl FlowPredictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, loc: &PreparedLocation, gauge: usize, day: usize) -> Result<Option<f64>> {
        Ok(loc.gauges[gauge].flow.get(day))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteResult {
    pub location: String,
    pub site_id: String,
    pub n_days: usize,
    pub sse: f64,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub predictor: String,
    /// Always "pooled": squared errors of every (site, day) pair averaged together.
    pub aggregation: String,
    pub aggregate_rmse: f64,
    pub n_days: usize,
    pub min_day: usize,
    pub sites: Vec<SiteResult>,
    pub fit_range: Option<FitRange>,
    pub checkpoint_id: Option<String>,
    pub config: Value,
}

impl EvalReport {
    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)?;
        let rows = self.sites.iter().map(|s| ComparisonRow {
            variant: self.variant.clone(),
            site: format!("{}/{}", s.location, s.site_id),
            n_days: s.n_days,
            rmse: s.rmse,
            aggregate: self.aggregate_rmse,
        });
        write_rows(&dir.join(format!("{stem}.csv")), rows)
    }
}

/// One line of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub site: String,
    pub n_days: usize,
    pub rmse: Option<f64>,
    pub aggregate: f64,
}

pub fn write_rows(path: &Path, rows: impl IntoIterator<Item = ComparisonRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

fn predict_days<P: FlowPredictor + ?Sized>(
    predictor: &P,
    loc: &PreparedLocation,
    gauge: usize,
    days: &[usize],
) -> Result<Vec<Option<f64>>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        days.par_iter()
            .map(|&d| predictor.predict(loc, gauge, d))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        days.iter()
            .map(|&d| predictor.predict(loc, gauge, d))
            .collect()
    }
}

/// Scores `predictor` on every measured day `t ≥ min_day` of every gauge.
/// Days the predictor cannot serve are left out and not counted.
pub fn evaluate_predictor<P: FlowPredictor + ?Sized>(
    predictor: &P,
    locations: &[PreparedLocation],
    min_day: usize,
    variant: &str,
) -> Result<EvalReport> {
    let mut sites = Vec::new();
    let mut all_preds = Vec::new();
    let mut all_gts = Vec::new();
    for loc in locations {
        for (gi, gauge) in loc.gauges.iter().enumerate() {
            let days = loc.supervised_days(gi, min_day);
            let preds = predict_days(predictor, loc, gi, &days)?;
            let mut site_preds = Vec::new();
            let mut site_gts = Vec::new();
            for (&day, pred) in days.iter().zip(preds) {
                if let (Some(p), Some(g)) = (pred, gauge.flow.get(day)) {
                    site_preds.push(p);
                    site_gts.push(g);
                }
            }
            let site_rmse = rmse(&site_preds, &site_gts).ok();
            let sse = site_rmse.map_or(0.0, |r| r * r * site_preds.len() as f64);
            sites.push(SiteResult {
                location: loc.name.clone(),
                site_id: gauge.site_id.clone(),
                n_days: site_preds.len(),
                sse,
                rmse: site_rmse,
            });
            all_preds.extend(site_preds);
            all_gts.extend(site_gts);
        }
    }
    if all_preds.is_empty() {
        return Err(Error::NoData(format!(
            "no evaluable days at or after day {min_day}"
        )));
    }
    Ok(EvalReport {
        variant: variant.to_string(),
        predictor: predictor.name().to_string(),
        aggregation: "pooled".into(),
        aggregate_rmse: rmse(&all_preds, &all_gts)?,
        n_days: all_preds.len(),
        min_day,
        sites,
        fit_range: predictor.fit_range(),
        checkpoint_id: None,
        config: Value::Null,
    })
}

/// Loads run metadata from a checkpoint, prepares `locations` with its
/// normalization and scores the stored model.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    locations: &[Location],
    variant: &str,
) -> Result<EvalReport> {
    let meta = CheckpointMeta::from_checkpoint(ckpt)?;
    let prepared = locations
        .iter()
        .map(|l| PreparedLocation::prepare(l, &meta.normalization))
        .collect::<Result<Vec<_>>>()?;
    let predictor = ModelPredictor::new(&ckpt.model, &meta.config.sampler);
    let mut report =
        evaluate_predictor(&predictor, &prepared, meta.config.eval_min_day(), variant)?;
    report.checkpoint_id = Some(format!("{}@{}", meta.run_id, meta.step));
    report.config = meta.config.to_value();
    Ok(report)
}

/// A suite entry: a preset name, optionally with extra `key=value` overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantSpec {
    Preset(String),
    Custom {
        name: String,
        #[serde(default)]
        preset: Option<String>,
        #[serde(default)]
        overrides: Vec<String>,
    },
}

impl VariantSpec {
    pub fn name(&self) -> &str {
        match self {
            VariantSpec::Preset(n) => n,
            VariantSpec::Custom { name, .. } => name,
        }
    }

    /// Config of this variant. Custom entries start from the preset named
    /// `preset`, or from the preset matching `name` when one exists.
    pub fn resolve(&self, base: &RunConfig) -> Result<RunConfig> {
        match self {
            VariantSpec::Preset(n) => base.with_patch(&ablation_preset(n, base)?),
            VariantSpec::Custom {
                name,
                preset,
                overrides,
            } => {
                let start = match preset {
                    Some(p) => base.with_patch(&ablation_preset(p, base)?)?,
                    None => match ablation_preset(name, base) {
                        Ok(patch) => base.with_patch(&patch)?,
                        Err(e) if overrides.is_empty() => return Err(e),
                        Err(_) => base.clone(),
                    },
                };
                start.with_overrides(overrides)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSuite {
    pub variants: Vec<VariantSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl AblationSuite {
    pub fn new(names: &[&str], seeds: &[u64]) -> Self {
        Self {
            variants: names
                .iter()
                .map(|n| VariantSpec::Preset(n.to_string()))
                .collect(),
            seeds: seeds.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("ablation suite has no variants".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation suite has no seeds".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "duplicate variant names in ablation suite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub config: RunConfig,
    /// One report per seed, in suite order.
    pub reports: Vec<EvalReport>,
    pub median_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    pub min_day: usize,
    pub variants: Vec<VariantResult>,
}

impl AblationResult {
    pub fn median(&self, variant: &str) -> Option<f64> {
        self.variants
            .iter()
            .find(|v| v.variant == variant)
            .map(|v| v.median_rmse)
    }

    /// One row per variant; `site` is "all" and `rmse` the median over seeds.
    pub fn rows(&self) -> Vec<ComparisonRow> {
        self.variants
            .iter()
            .map(|v| {
                let n_days = v.reports.first().map_or(0, |r| r.n_days);
                ComparisonRow {
                    variant: v.variant.clone(),
                    site: "all".into(),
                    n_days,
                    rmse: Some(v.median_rmse),
                    aggregate: v.median_rmse,
                }
            })
            .collect()
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Retrains every variant once per seed and scores the best-validation model.
/// All variants are scored on the same days: those at or after the largest
/// history any variant needs.
pub fn run_ablation_suite(
    base: &RunConfig,
    suite: &AblationSuite,
    train_locations: &[Location],
    val_locations: &[Location],
    out_dir: Option<&Path>,
) -> Result<AblationResult> {
    suite.validate()?;
    if val_locations.is_empty() {
        return Err(Error::NoData("ablation needs validation locations".into()));
    }
    let configs = suite
        .variants
        .iter()
        .map(|v| v.resolve(base).map(|c| (v.name().to_string(), c)))
        .collect::<Result<Vec<_>>>()?;
    let min_day = configs
        .iter()
        .map(|(_, c)| c.eval_min_day())
        .max()
        .unwrap_or(0);

    let mut variants = Vec::new();
    for (name, config) in configs {
        let (norm, train_prep, val_prep) =
            prepare_split(train_locations, val_locations, config.data.maxima_scope)?;
        let mut reports = Vec::new();
        for &seed in &suite.seeds {
            let mut cfg = config.clone();
            cfg.train.seed = seed;
            cfg.model.init_seed = seed;
            cfg.data.eval_min_day = Some(min_day);
            let run_dir = out_dir.map(|d| d.join("runs").join(format!("{name}-seed{seed}")));
            let outcome = train(&train_prep, &val_prep, &norm, &cfg, run_dir.as_deref())?;
            let predictor = ModelPredictor::new(&outcome.best_model, &cfg.sampler);
            let mut report = evaluate_predictor(&predictor, &val_prep, min_day, &name)?;
            report.checkpoint_id = Some(format!("{}@{}", outcome.run_id, outcome.best_step));
            report.config = cfg.to_value();
            reports.push(report);
        }
        let rmses: Vec<f64> = reports.iter().map(|r| r.aggregate_rmse).collect();
        variants.push(VariantResult {
            variant: name,
            config,
            median_rmse: median(&rmses).expect("at least one seed"),
            reports,
        });
    }
    let result = AblationResult {
        seeds: suite.seeds.clone(),
        min_day,
        variants,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("ablation.json"), &result)?;
        write_rows(&dir.join("comparison.csv"), result.rows())?;
    }
    Ok(result)
}

/// Colormap from dark blue (low) to light cyan-white (high).
pub fn colormap(index: u8) -> [u8; 3] {
    let t = index as f32 / 255.0;
    let lerp = |a: f32, b: f32| (a + (b - a) * t).round() as u8;
    [lerp(8.0, 230.0), lerp(24.0, 245.0), lerp(88.0, 255.0)]
}

/// Maps the minimum of `values` to 0 and the maximum to 255.
pub fn colormap_indices(values: &Array2<f32>) -> Array2<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    values.mapv(|v| {
        if span > 0.0 && span.is_finite() {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    })
}

pub fn render_png(values: &Array2<f32>, path: &Path) -> Result<()> {
    let idx = colormap_indices(values);
    let (h, w) = idx.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((r, c), &i) in idx.indexed_iter() {
        img.put_pixel(c as u32, r as u32, image::Rgb(colormap(i)));
    }
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Dense prediction of a checkpoint over one window. Writes `<stem>.f32`,
/// `<stem>.json` and `<stem>.png` into `out_dir` with flows in m³/s.
pub fn predict_dense(
    ckpt: &Checkpoint,
    location: &Location,
    gauge: usize,
    origin: (usize, usize),
    day: usize,
    out_dir: &Path,
    stem: &str,
) -> Result<FlowMap> {
    let meta = CheckpointMeta::from_checkpoint(ckpt)?;
    let s = &meta.config.sampler;
    let min_day = s.mode.min_day();
    if day < min_day {
        return Err(Error::InsufficientHistory(format!(
            "day {day} precedes the first day with full history ({min_day})"
        )));
    }
    let loc = PreparedLocation::prepare(location, &meta.normalization)?;
    if gauge >= loc.gauges.len() {
        return Err(Error::OutOfBounds(format!(
            "gauge {gauge} of {} (has {})",
            loc.name,
            loc.gauges.len()
        )));
    }
    if day >= loc.n_days() {
        return Err(Error::OutOfBounds(format!(
            "day {day} beyond the {} days of {}",
            loc.n_days(),
            loc.name
        )));
    }
    let (gh, gw) = (loc.stack.height(), loc.stack.width());
    if origin.0 + s.h > gh || origin.1 + s.w > gw {
        return Err(Error::OutOfBounds(format!(
            "{}x{} window at {origin:?} exceeds the {gh}x{gw} grid",
            s.h, s.w
        )));
    }
    let sample = window_sample(&loc, gauge, origin, day, s.h, s.w, &s.mode)?;
    let temporal = sample.temporal.as_ref().map(|t| t.view());
    let values = ckpt
        .model
        .predict(&sample.input.view(), temporal.as_ref())?;
    let map = FlowMap {
        values,
        flow_norm_max: loc.flow_max,
    };
    let dense = map.denormalized();
    write_grid(out_dir, stem, &dense, loc.stack.cell_size_m())?;
    render_png(&dense, &out_dir.join(format!("{stem}.png")))?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{mean_per_site_rmse, previous_flow_rmse};
    use crate::location::{prepare_split, MaximaScope};
    use crate::synth::{generate_location, SynthParams};
    use proptest::prelude::*;

    fn synth_prepared(seed: u64, n: usize) -> Vec<PreparedLocation> {
        let locs: Vec<Location> = (0..n)
            .map(|i| {
                let p = SynthParams {
                    name: format!("s{i}"),
                    seed: seed + i as u64,
                    height: 40,
                    width: 40,
                    n_days: 120,
                    missing_fraction: 0.1,
                    ..SynthParams::default()
                };
                generate_location(&p).unwrap().location
            })
            .collect();
        prepare_split(&locs, &[], MaximaScope::All).unwrap().1
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.5], &[1.0, 2.5]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert!((rmse(&[0.0; 3], &[0.0, 0.0, 3.0]).unwrap() - 1.7320508).abs() < 1e-7);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn oracle_scores_zero() {
        let locs = synth_prepared(3, 2);
        let r = evaluate_predictor(&OraclePredictor, &locs, 20, "oracle").unwrap();
        assert_eq!(r.aggregate_rmse, 0.0);
        assert!(r.n_days > 0);
        assert_eq!(r.sites.len(), 4);
    }

    #[test]
    fn mean_predictor_rmse_is_population_std() {
        let locs = synth_prepared(5, 1);
        let p = MeanPerSitePredictor::fit(&locs, FitRange::AllDays).unwrap();
        let r = evaluate_predictor(&p, &locs, 0, "mean").unwrap();
        for (site, g) in r.sites.iter().zip(&locs[0].gauges) {
            let v: Vec<f64> = g.flow.measured_values().collect();
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64;
            assert!((site.rmse.unwrap() - var.sqrt()).abs() < 1e-10 * var.sqrt().max(1.0));
        }
        assert_eq!(r.fit_range, Some(FitRange::AllDays));
    }

    #[test]
    fn wrapped_baselines_match_baseline_module() {
        let locs = synth_prepared(11, 2);
        let min_day = 20;
        let prev = evaluate_predictor(&PreviousFlowPredictor, &locs, min_day, "prev").unwrap();
        let mean_p = MeanPerSitePredictor::fit(&locs, FitRange::AllDays).unwrap();
        let mean = evaluate_predictor(&mean_p, &locs, min_day, "mean").unwrap();
        let mut k = 0;
        for loc in &locs {
            for g in &loc.gauges {
                let days = min_day..loc.n_days();
                let (r, n) = previous_flow_rmse(&g.flow, days.clone()).unwrap();
                assert_eq!(prev.sites[k].rmse.unwrap().to_bits(), r.to_bits());
                assert_eq!(prev.sites[k].n_days, n);
                let (r, n) = mean_per_site_rmse(&g.flow, FitRange::AllDays, days).unwrap();
                assert_eq!(mean.sites[k].rmse.unwrap().to_bits(), r.to_bits());
                assert_eq!(mean.sites[k].n_days, n);
                k += 1;
            }
        }
    }

    #[test]
    fn no_days_is_an_error() {
        let locs = synth_prepared(1, 1);
        assert!(evaluate_predictor(&OraclePredictor, &locs, 10_000, "x").is_err());
    }

    #[test]
    fn colormap_extremes() {
        let v = Array2::from_shape_vec((2, 2), vec![3.0f32, -1.0, 0.5, 7.0]).unwrap();
        let idx = colormap_indices(&v);
        assert_eq!(idx[(1, 1)], 255);
        assert_eq!(idx[(0, 1)], 0);
        assert_eq!(*idx.iter().min().unwrap(), 0);
        assert_eq!(*idx.iter().max().unwrap(), 255);
        let flat = colormap_indices(&Array2::from_elem((3, 3), 2.0f32));
        assert!(flat.iter().all(|&i| i == 0));
        let dark = colormap(0);
        let light = colormap(255);
        assert!(dark.iter().sum::<u8>() < light.iter().map(|&x| x / 3).sum::<u8>());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn suite_validation() {
        assert!(AblationSuite::new(&[], &[0]).validate().is_err());
        assert!(AblationSuite::new(&["main"], &[]).validate().is_err());
        assert!(AblationSuite::new(&["main", "main"], &[0])
            .validate()
            .is_err());
        AblationSuite::new(&["main", "no-rain"], &[0, 1, 2])
            .validate()
            .unwrap();
        let parsed: AblationSuite = serde_json::from_str(
            r#"{"variants": ["main", {"name": "fast", "preset": "no-rain", "overrides": ["lr=0.01"]}]}"#,
        )
        .unwrap();
        assert_eq!(parsed.seeds, vec![0]);
        let base = crate::config::RunProfile::Desk.config();
        let fast = parsed.variants[1].resolve(&base).unwrap();
        assert_eq!(fast.train.lr, 0.01);
        assert!(!fast.sampler.mode.include_rain);
        let bad = VariantSpec::Custom {
            name: "x".into(),
            preset: None,
            overrides: vec!["lr=banana".into()],
        };
        assert!(matches!(bad.resolve(&base), Err(Error::Config(_))));
        assert!(VariantSpec::Preset("nope".into()).resolve(&base).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ComparisonRow {
                variant: "main".into(),
                site: "all".into(),
                n_days: 10,
                rmse: Some(0.25),
                aggregate: 0.25,
            },
            ComparisonRow {
                variant: "no-rain".into(),
                site: "all".into(),
                n_days: 10,
                rmse: None,
                aggregate: 1.5,
            },
        ];
        let p = dir.path().join("c.csv");
        write_rows(&p, rows.clone()).unwrap();
        assert_eq!(read_rows(&p).unwrap(), rows);
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("variant,site,n_days,rmse,aggregate"));
    }

    proptest! {
        #[test]
        fn pooled_aggregate_equals_concatenation(
            sites in prop::collection::vec(
                prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30), 1..5)
        ) {
            let mut sse = 0.0;
            let mut n = 0;
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for s in &sites {
                let (p, g): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
                let r = rmse(&p, &g).unwrap();
                sse += r * r * p.len() as f64;
                n += p.len();
                preds.extend(p);
                gts.extend(g);
            }
            let pooled = rmse(&preds, &gts).unwrap();
            prop_assert!((pooled - (sse / n as f64).sqrt()).abs() <= 1e-9 * pooled.max(1.0));
        }
    }
}
