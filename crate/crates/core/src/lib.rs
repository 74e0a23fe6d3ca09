//! Dense water-flow-intensity regression from rasters and weather series,
//! trained against a handful of gauge pixels.

pub mod baselines;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod location;
pub mod losses;
pub mod model;
pub mod raster;
pub mod sampler;
pub mod synth;
pub mod timeseries;
pub mod training;

pub use error::{Error, Result};
