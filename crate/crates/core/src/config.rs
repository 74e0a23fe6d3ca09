//! Run configuration: named profiles, JSON config files, `key=value`
//! overrides and the ablation presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::location::MaximaScope;
use crate::losses::{LossScale, LossSpec};
use crate::model::{Arch, ModelConfig, DEFAULT_FC_HIDDEN};
use crate::raster::{read_json, LayerName};
use crate::sampler::{SamplerConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    #[serde(default = "default_fc_hidden")]
    pub fc_hidden: usize,
    pub init_seed: u64,
}

fn default_fc_hidden() -> usize {
    DEFAULT_FC_HIDDEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub total_batches: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sampler threads; only a single worker gives reproducible runs.
    pub workers: usize,
    pub loss_scale: LossScale,
    /// Also score the training locations at every evaluation point.
    pub eval_train: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub maxima_scope: MaximaScope,
    /// First evaluated day; defaults to the assembly's earliest usable day.
    pub eval_min_day: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub sampler: SamplerConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub loss: LossSpec,
    pub data: DataSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RunProfile {
    Paper,
    Desk,
}

impl RunProfile {
    pub fn name(self) -> &'static str {
        match self {
            RunProfile::Paper => "paper",
            RunProfile::Desk => "desk",
        }
    }

    fn source(self) -> &'static str {
        match self {
            RunProfile::Paper => include_str!("../profiles/paper.json"),
            RunProfile::Desk => include_str!("../profiles/desk.json"),
        }
    }

    pub fn config(self) -> RunConfig {
        serde_json::from_str(self.source()).expect("bundled profile")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.total_batches == 0 || t.eval_every == 0 || t.workers == 0 {
            return Err(Error::Config(
                "batch_size, total_batches, eval_every and workers must be positive".into(),
            ));
        }
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                t.lr
            )));
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(t.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        self.model_config()?.validate()
    }

    pub fn arch(&self) -> Arch {
        match self.sampler.mode.variant {
            Variant::FcEarly => Arch::FcEarly,
            Variant::FcMid => Arch::FcMid,
            _ => Arch::Fcn8,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            in_channels: self.sampler.mode.input_channels(),
            arch: self.arch(),
            temporal_vector_len: self.sampler.mode.temporal_vector_len(),
            base_width: self.model.base_width,
            fc_hidden: self.model.fc_hidden,
            init_seed: self.model.init_seed,
        })
    }

    pub fn eval_min_day(&self) -> usize {
        self.data
            .eval_min_day
            .unwrap_or_else(|| self.sampler.mode.min_day())
            .max(self.sampler.mode.min_day())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a JSON file on top of this config. The file may be partial.
    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        let patch: Value = read_json(path)?;
        let mut base = self.to_value();
        merge(&mut base, &patch);
        Self::from_value(base)
    }

    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = self.to_value();
        for o in overrides {
            apply_override(&mut value, o.as_ref())?;
        }
        Self::from_value(value)
    }

    pub fn with_patch(&self, patch: &Value) -> Result<Self> {
        let mut value = self.to_value();
        merge(&mut value, patch);
        Self::from_value(value)
    }
}

/// Deep merge of JSON objects; non-object values replace.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn leaf_paths(value: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = value {
        for (k, v) in map {
            prefix.push(k.clone());
            out.push(prefix.clone());
            leaf_paths(v, prefix, out);
            prefix.pop();
        }
    }
}

/// `path=value` where `path` is dotted (`train.lr`) or a key that occurs
/// exactly once anywhere in the config (`lr`). The value is parsed as JSON,
/// falling back to a plain string.
pub fn apply_override(config: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    let mut all = Vec::new();
    leaf_paths(config, &mut Vec::new(), &mut all);
    let path = if all.contains(&parts) {
        parts
    } else {
        let matches: Vec<&Vec<String>> = all.iter().filter(|p| p.ends_with(&parts)).collect();
        match matches.as_slice() {
            [one] => (*one).clone(),
            [] => return Err(Error::Config(format!("unknown config key {key:?}"))),
            _ => return Err(Error::Config(format!("config key {key:?} is ambiguous"))),
        }
    };
    let parsed =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut slot = config;
    for p in &path {
        slot = slot
            .get_mut(p)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *slot = parsed;
    Ok(())
}

fn layers_without(drop: &[LayerName]) -> Vec<LayerName> {
    LayerName::ALL
        .iter()
        .copied()
        .filter(|l| !drop.contains(l))
        .collect()
}

pub const ABLATION_PRESETS: &[&str] = &[
    "main",
    "no-elev",
    "only-elev",
    "no-soil",
    "half-time-hist",
    "no-temp",
    "no-rain",
    "flow-t1",
    "flow-t2",
    "flow-t3",
    "alt-rain-temp",
    "fc-early",
    "fc-mid",
    "huber-0.8",
    "huber-1.1",
    "mse",
    "l1",
];

/// Config patch of a named variant, relative to the base run.
pub fn ablation_preset(name: &str, base: &RunConfig) -> Result<Value> {
    use serde_json::json;
    let layers = |l: Vec<LayerName>| json!({"sampler": {"mode": {"include_layers": l}}});
    let variant = |v: Variant| json!({"sampler": {"mode": {"variant": v}}});
    let elev = [LayerName::Elevation, LayerName::Slope];
    let soil = [
        LayerName::SoilType,
        LayerName::SoilMoisture,
        LayerName::SoilDepth,
        LayerName::LandCover,
    ];
    let fc = |v: Variant| json!({"sampler": {"h": 100, "w": 100, "mode": {"variant": v}}});
    Ok(match name {
        "main" => json!({}),
        "no-elev" => layers(layers_without(&elev)),
        "only-elev" => layers(elev.to_vec()),
        "no-soil" => layers(layers_without(&soil)),
        "half-time-hist" => json!({"sampler": {"mode": {"T": base.sampler.mode.history / 2}}}),
        "no-temp" => json!({"sampler": {"mode": {"include_temp": false}}}),
        "no-rain" => json!({"sampler": {"mode": {"include_rain": false}}}),
        "flow-t1" => variant(Variant::FlowLag(1)),
        "flow-t2" => variant(Variant::FlowLag(2)),
        "flow-t3" => variant(Variant::FlowLag(3)),
        "alt-rain-temp" => variant(Variant::AltRainTemp),
        "fc-early" => fc(Variant::FcEarly),
        "fc-mid" => fc(Variant::FcMid),
        "huber-0.8" => json!({"loss": {"kind": "huber", "delta": 0.8}}),
        "huber-1.1" => json!({"loss": {"kind": "huber", "delta": 1.1}}),
        "mse" => json!({"loss": {"kind": "mse"}}),
        "l1" => json!({"loss": {"kind": "l1"}}),
        other => {
            return Err(Error::Config(format!(
                "unknown variant {other:?}; known: {}",
                ABLATION_PRESETS.join(", ")
            )))
        }
    })
}
