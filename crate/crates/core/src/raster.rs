//! Aligned multi-layer raster stacks: on-disk format, layer-wise maxima,
//! normalization and window cropping.
//!
//! Every layer of a stack lives on one shared grid. On disk a stack is a
//! directory holding, per layer, a headerless little-endian `f32` file
//! (`<layer>.f32`, row-major) next to a JSON sidecar (`<layer>.json`), plus a
//! `stack.json` listing the layer order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of spatial channels in a full stack.
pub const NUM_LAYERS: usize = 10;

/// Cell size of the shared grid in metres.
pub const DEFAULT_CELL_SIZE_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerName {
    SatelliteR,
    SatelliteG,
    SatelliteB,
    Elevation,
    Slope,
    SoilMoisture,
    LandCover,
    SoilType,
    SoilDepth,
    HydraulicConductivity,
}

impl LayerName {
    /// Canonical channel order shared by every location.
    pub const ALL: [LayerName; NUM_LAYERS] = [
        LayerName::SatelliteR,
        LayerName::SatelliteG,
        LayerName::SatelliteB,
        LayerName::Elevation,
        LayerName::Slope,
        LayerName::SoilMoisture,
        LayerName::LandCover,
        LayerName::SoilType,
        LayerName::SoilDepth,
        LayerName::HydraulicConductivity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerName::SatelliteR => "satellite_r",
            LayerName::SatelliteG => "satellite_g",
            LayerName::SatelliteB => "satellite_b",
            LayerName::Elevation => "elevation",
            LayerName::Slope => "slope",
            LayerName::SoilMoisture => "soil_moisture",
            LayerName::LandCover => "land_cover",
            LayerName::SoilType => "soil_type",
            LayerName::SoilDepth => "soil_depth",
            LayerName::HydraulicConductivity => "hydraulic_conductivity",
        }
    }

    /// Position in the canonical order.
    pub fn index(self) -> usize {
        LayerName::ALL.iter().position(|&l| l == self).unwrap()
    }

    /// Resolution of the source product before resampling onto the shared grid.
    pub fn native_resolution_m(self) -> f64 {
        match self {
            LayerName::SatelliteR | LayerName::SatelliteG | LayerName::SatelliteB => 10.0,
            LayerName::Elevation | LayerName::Slope => 50.0,
            LayerName::SoilMoisture => 2.0,
            LayerName::LandCover | LayerName::SoilType | LayerName::SoilDepth => 10.0,
            LayerName::HydraulicConductivity => 100.0,
        }
    }
}

impl fmt::Display for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerName::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown layer name {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterLayer {
    pub name: LayerName,
    pub data: Array2<f32>,
}

impl RasterLayer {
    pub fn native_resolution_m(&self) -> f64 {
        self.name.native_resolution_m()
    }
}

/// The ten spatial layers of one location, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    layers: Vec<RasterLayer>,
    height: usize,
    width: usize,
    cell_size_m: f64,
}

/// Sidecar metadata written next to every `.f32` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub height: usize,
    pub width: usize,
    pub cell_size_m: f64,
    pub layer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackManifest {
    layers: Vec<LayerName>,
}

impl RasterStack {
    /// Builds a stack from layers given in canonical order.
    pub fn new(layers: Vec<RasterLayer>, cell_size_m: f64) -> Result<Self> {
        if layers.len() != NUM_LAYERS {
            return Err(Error::InvalidArgument(format!(
                "expected {NUM_LAYERS} layers, got {}",
                layers.len()
            )));
        }
        for (layer, expected) in layers.iter().zip(LayerName::ALL) {
            if layer.name != expected {
                return Err(Error::InvalidArgument(format!(
                    "layer {} out of canonical order (expected {expected})",
                    layer.name
                )));
            }
        }
        if !(cell_size_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_size_m}"
            )));
        }
        let (height, width) = layers[0].data.dim();
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty raster grid".into()));
        }
        for layer in &layers {
            if layer.data.dim() != (height, width) {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} is {}x{}, expected {height}x{width}",
                    layer.name,
                    layer.data.nrows(),
                    layer.data.ncols()
                )));
            }
            if layer.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {}", layer.name)));
            }
        }
        Ok(Self {
            layers,
            height,
            width,
            cell_size_m,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn layers(&self) -> &[RasterLayer] {
        &self.layers
    }

    pub fn layer(&self, name: LayerName) -> &RasterLayer {
        &self.layers[name.index()]
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_raster_stack(dir)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for layer in &self.layers {
            write_grid(dir, layer.name.as_str(), &layer.data, self.cell_size_m)?;
        }
        let manifest = StackManifest {
            layers: LayerName::ALL.to_vec(),
        };
        write_json(&dir.join("stack.json"), &manifest)
    }
}

/// Loads and validates a stack directory.
pub fn load_raster_stack(dir: &Path) -> Result<RasterStack> {
    let manifest_path = dir.join("stack.json");
    if manifest_path.exists() {
        let manifest: StackManifest = read_json(&manifest_path)?;
        if manifest.layers != LayerName::ALL {
            return Err(Error::InvalidArgument(format!(
                "{} does not list the canonical layer order",
                manifest_path.display()
            )));
        }
    }
    let mut layers = Vec::with_capacity(NUM_LAYERS);
    let mut cell_size = None;
    for name in LayerName::ALL {
        if !dir.join(format!("{name}.f32")).exists() {
            return Err(Error::MissingLayer {
                layer: name.to_string(),
                dir: dir.to_path_buf(),
            });
        }
        let (data, meta) = read_grid(dir, name.as_str())?;
        if meta.layer != name.as_str() {
            return Err(Error::Parse(format!(
                "sidecar for {name} names layer {:?}",
                meta.layer
            )));
        }
        cell_size.get_or_insert(meta.cell_size_m);
        layers.push(RasterLayer { name, data });
    }
    RasterStack::new(layers, cell_size.unwrap_or(DEFAULT_CELL_SIZE_M))
}

/// Writes `<name>.f32` and `<name>.json` into `dir`.
pub fn write_grid(dir: &Path, name: &str, data: &Array2<f32>, cell_size_m: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let raw = dir.join(format!("{name}.f32"));
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let meta = GridMeta {
        height: data.nrows(),
        width: data.ncols(),
        cell_size_m,
        layer: name.to_string(),
    };
    write_json(&dir.join(format!("{name}.json")), &meta)
}

/// Reads a grid written by [`write_grid`].
pub fn read_grid(dir: &Path, name: &str) -> Result<(Array2<f32>, GridMeta)> {
    let meta: GridMeta = read_json(&dir.join(format!("{name}.json")))?;
    let raw = dir.join(format!("{name}.f32"));
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != meta.height * meta.width * 4 {
        return Err(Error::DimensionMismatch(format!(
            "{} holds {} bytes, sidecar says {}x{}",
            raw.display(),
            bytes.len(),
            meta.height,
            meta.width
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((meta.height, meta.width), values)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok((data, meta))
}

/// Per-layer divisors mapping raw layer values into [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaxima(pub [f32; NUM_LAYERS]);

impl LayerMaxima {
    pub fn get(&self, name: LayerName) -> f32 {
        self.0[name.index()]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_map())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map: BTreeMap<String, f32> = read_json(path)?;
        Self::from_map(&map)
    }

    pub fn to_map(&self) -> BTreeMap<String, f32> {
        LayerName::ALL
            .iter()
            .map(|l| (l.to_string(), self.get(*l)))
            .collect()
    }

    pub fn from_map(map: &BTreeMap<String, f32>) -> Result<Self> {
        let mut out = [0.0; NUM_LAYERS];
        for (i, name) in LayerName::ALL.iter().enumerate() {
            let v = *map
                .get(name.as_str())
                .ok_or_else(|| Error::Parse(format!("maxima missing layer {name}")))?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parse(format!("maximum for {name} must be positive")));
            }
            out[i] = v;
        }
        Ok(LayerMaxima(out))
    }
}

impl Serialize for LayerMaxima {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LayerMaxima {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, f32>::deserialize(d)?;
        LayerMaxima::from_map(&map).map_err(serde::de::Error::custom)
    }
}

/// Layer-wise maximum over every given stack. A non-positive maximum
/// becomes 1 so that degenerate layers normalize to themselves.
pub fn compute_layer_maxima(stacks: &[&RasterStack]) -> Result<LayerMaxima> {
    if stacks.is_empty() {
        return Err(Error::NoData(
            "no raster stacks to compute maxima over".into(),
        ));
    }
    let mut maxima = [f32::NEG_INFINITY; NUM_LAYERS];
    for stack in stacks {
        for (m, layer) in maxima.iter_mut().zip(&stack.layers) {
            let layer_max = layer.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            *m = m.max(layer_max);
        }
    }
    for m in &mut maxima {
        if *m <= 0.0 {
            *m = 1.0;
        }
    }
    Ok(LayerMaxima(maxima))
}

/// Divides each layer by its maximum.
pub fn normalize_stack(stack: &RasterStack, maxima: &LayerMaxima) -> Result<RasterStack> {
    if let Some(bad) = maxima.0.iter().find(|m| !(**m > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "layer maxima must be positive, got {bad}"
        )));
    }
    let layers = stack
        .layers
        .iter()
        .zip(maxima.0)
        .map(|(layer, m)| RasterLayer {
            name: layer.name,
            data: layer.data.mapv(|v| v / m),
        })
        .collect();
    RasterStack::new(layers, stack.cell_size_m)
}

/// Exact sub-grid copy of an `h`×`w` window whose top-left corner is `origin`.
pub fn crop_window(
    stack: &RasterStack,
    origin: (usize, usize),
    h: usize,
    w: usize,
) -> Result<RasterStack> {
    let (row, col) = origin;
    if h == 0 || w == 0 || row + h > stack.height || col + w > stack.width {
        return Err(Error::OutOfBounds(format!(
            "window at ({row}, {col}) of size {h}x{w} exceeds {}x{} grid",
            stack.height, stack.width
        )));
    }
    let layers = stack
        .layers
        .iter()
        .map(|layer| RasterLayer {
            name: layer.name,
            data: layer.data.slice(s![row..row + h, col..col + w]).to_owned(),
        })
        .collect();
    RasterStack::new(layers, stack.cell_size_m)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
