//! WebAssembly bindings for a static page. Results cross the boundary as
//! JSON strings or raw RGBA bytes.

use dense_flow::evaluation::{colormap, colormap_indices};
use dense_flow::losses::{LossKind, LossSpec};
use dense_flow::raster::LayerName;
use dense_flow::synth::{
    generate_location, run_reservoir, synth_weather, ReservoirParams, SynthParams,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Daily weather and reservoir outflow for `days` days.
#[wasm_bindgen]
pub fn hydrograph(
    k: f64,
    c: f64,
    tau0: f64,
    melt_rate: f64,
    days: usize,
    seed: u64,
) -> Result<String, JsError> {
    let params = SynthParams {
        n_days: days.max(1),
        seed,
        ..SynthParams::default()
    };
    let (rain, temp) = synth_weather(&params, &mut ChaCha8Rng::seed_from_u64(seed));
    let p = ReservoirParams {
        k,
        c,
        tau0,
        melt_rate,
        scale: 1.0,
    };
    let run = run_reservoir(&rain, &temp, &p).map_err(js_err)?;
    Ok(json!({
        "rain": rain,
        "temp": temp,
        "flow": run.flow,
        "final_storage": run.final_storage,
        "final_snow": run.final_snow,
    })
    .to_string())
}

/// Huber, squared and absolute losses with their derivatives on `n` residuals in `[lo, hi]`.
#[wasm_bindgen]
pub fn loss_curves(delta: f64, lo: f64, hi: f64, n: usize) -> Result<String, JsError> {
    let huber = LossSpec::huber(delta);
    huber.validate().map_err(js_err)?;
    let n = n.max(2);
    let e: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let mut curves = serde_json::Map::new();
    for (name, spec) in [
        ("huber", huber),
        (
            "mse",
            LossSpec {
                kind: LossKind::Mse,
                delta,
            },
        ),
        (
            "l1",
            LossSpec {
                kind: LossKind::L1,
                delta,
            },
        ),
    ] {
        let value: Vec<f64> = e.iter().map(|&x| spec.value(x)).collect();
        let slope: Vec<f64> = e.iter().map(|&x| spec.derivative(x)).collect();
        curves.insert(name.into(), json!({"value": value, "derivative": slope}));
    }
    Ok(json!({"residual": e, "curves": curves}).to_string())
}

fn layer_by_name(name: &str) -> Result<LayerName, JsError> {
    LayerName::ALL
        .iter()
        .copied()
        .find(|l| l.as_str() == name)
        .ok_or_else(|| JsError::new(&format!("unknown layer {name}")))
}

/// One layer of a synthetic location as RGBA pixels, row-major.
#[wasm_bindgen]
pub fn terrain_rgba(seed: u64, size: usize, layer: &str) -> Result<Vec<u8>, JsError> {
    let loc = synth_terrain(seed, size)?;
    let data = &loc.stack.layer(layer_by_name(layer)?).data;
    let mut out = Vec::with_capacity(data.len() * 4);
    for &i in colormap_indices(data).iter() {
        let [r, g, b] = colormap(i);
        out.extend_from_slice(&[r, g, b, 255]);
    }
    Ok(out)
}

/// Gauge pixels and reservoir coefficients of the same synthetic location.
#[wasm_bindgen]
pub fn terrain_gauges(seed: u64, size: usize) -> Result<String, JsError> {
    let params = terrain_params(seed, size);
    let synth = generate_location(&params).map_err(js_err)?;
    let gauges: Vec<_> = synth
        .location
        .gauges
        .iter()
        .zip(&synth.reservoirs)
        .map(|(g, r)| json!({"id": g.site_id, "row": g.pixel.0, "col": g.pixel.1, "k": r.k, "c": r.c}))
        .collect();
    Ok(json!(gauges).to_string())
}

#[wasm_bindgen]
pub fn layer_names() -> String {
    json!(LayerName::ALL
        .iter()
        .map(|l| l.as_str())
        .collect::<Vec<_>>())
    .to_string()
}

fn terrain_params(seed: u64, size: usize) -> SynthParams {
    SynthParams {
        name: "demo".into(),
        seed,
        height: size.clamp(8, 256),
        width: size.clamp(8, 256),
        n_days: 30,
        history: 5,
        n_gauges: 3,
        ..SynthParams::default()
    }
}

fn synth_terrain(seed: u64, size: usize) -> Result<dense_flow::location::Location, JsError> {
    generate_location(&terrain_params(seed, size))
        .map(|s| s.location)
        .map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hydrograph_has_one_value_per_day() {
        let v: serde_json::Value =
            serde_json::from_str(&hydrograph(0.4, 0.7, 0.0, 4.0, 90, 1).unwrap()).unwrap();
        assert_eq!(v["flow"].as_array().unwrap().len(), 90);
        assert_eq!(v["rain"].as_array().unwrap().len(), 90);
    }

    #[test]
    fn loss_curves_meet_at_zero() {
        let v: serde_json::Value =
            serde_json::from_str(&loss_curves(1.0, -2.0, 2.0, 5).unwrap()).unwrap();
        assert_eq!(v["curves"]["huber"]["value"][2], 0.0);
        assert_eq!(v["curves"]["huber"]["value"][0], 1.5);
        assert_eq!(v["curves"]["mse"]["value"][4], 4.0);
    }

    #[test]
    fn terrain_is_rgba() {
        let px = terrain_rgba(3, 20, "elevation").unwrap();
        assert_eq!(px.len(), 20 * 20 * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
        let g: serde_json::Value = serde_json::from_str(&terrain_gauges(3, 20).unwrap()).unwrap();
        assert_eq!(g.as_array().unwrap().len(), 3);
        let names: Vec<String> = serde_json::from_str(&layer_names()).unwrap();
        assert_eq!(names.len(), 10);
    }
}
