//! WebAssembly bindings behind `www/index.html`.
//!
//! Each exported function has a plain-Rust twin returning `Result<_, String>`
//! so the logic is testable without a JS host.

use rainnas_core::baselines::{fit_wem_weights, predict, BaselineKind};
use rainnas_core::data::{generate_synthetic, split_timeline, Mode, SyntheticConfig};
use rainnas_core::grad::cab_weights;
use rainnas_core::retrain::{evaluate, soft_level_probs};
use rainnas_core::search_space::CAB_LAMBDA;
use rainnas_core::supernet::GRID;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// Side length of every grid.
#[wasm_bindgen]
pub fn grid_size() -> usize {
    GRID
}

/// One synthetic member field followed by its channel-attention weights,
/// `2 * 33 * 33` values.
pub fn attention(seed: u64, member: usize) -> Result<Vec<f64>, String> {
    let d = generate_synthetic(&SyntheticConfig::new(1, Mode::Mmod, seed)).map_err(|e| e.to_string())?;
    if member >= d.channels {
        return Err(format!("member {member} out of range 0..{}", d.channels));
    }
    let px = d.pixels();
    let field: Vec<f64> = d.samples()[0].member(member, px).iter().map(|&v| v as f64).collect();
    let weights = cab_weights(&field, CAB_LAMBDA);
    Ok(field.into_iter().chain(weights).collect())
}

#[wasm_bindgen]
pub fn cab_map(seed: u64, member: usize) -> Result<Vec<f64>, JsValue> {
    attention(seed, member).map_err(js)
}

/// Scores EM, PM and WEM on the validation split of a fresh synthetic set.
/// Returns JSON with `metrics`, the WEM `weights` and the first validation
/// sample's `fields` (observation plus each baseline).
pub fn baselines_json(n: usize, seed: u64) -> Result<String, String> {
    let d = generate_synthetic(&SyntheticConfig::new(n, Mode::Mmod, seed)).map_err(|e| e.to_string())?;
    let (train, val) = split_timeline(&d);
    if val.is_empty() {
        return Err("validation split is empty; use more samples".into());
    }
    let weights = fit_wem_weights(&train).map_err(|e| e.to_string())?;
    let mut metrics = serde_json::Map::new();
    let mut fields = serde_json::Map::new();
    let obs: Vec<f64> = val.samples()[0].observation.iter().map(|&v| v as f64).collect();
    fields.insert("OBS".into(), json!(obs));
    for kind in BaselineKind::ALL {
        let preds = predict(kind, &val, Some(&weights)).map_err(|e| e.to_string())?;
        let report = evaluate(&preds, &val).map_err(|e| e.to_string())?;
        let name = kind.to_string().to_uppercase();
        metrics.insert(name.clone(), json!(report));
        fields.insert(name, json!(preds[0]));
    }
    Ok(json!({ "metrics": metrics, "weights": weights, "fields": fields }).to_string())
}

#[wasm_bindgen]
pub fn compare_baselines(n: usize, seed: u64) -> Result<String, JsValue> {
    baselines_json(n, seed).map_err(js)
}

/// Level probabilities on `steps` evenly spaced values in `[0, y_max]`,
/// row-major `steps x 5`.
pub fn level_curves(tau: f64, y_max: f64, steps: usize) -> Result<Vec<f64>, String> {
    if steps < 2 || !(y_max > 0.0) {
        return Err("need at least two steps and a positive range".into());
    }
    let ys: Vec<f64> = (0..steps).map(|i| y_max * i as f64 / (steps - 1) as f64).collect();
    let rows = soft_level_probs(&ys, tau).map_err(|e| e.to_string())?;
    Ok(rows.into_iter().flatten().collect())
}

#[wasm_bindgen]
pub fn soft_levels(tau: f64, y_max: f64, steps: usize) -> Result<Vec<f64>, JsValue> {
    level_curves(tau, y_max, steps).map_err(js)
}
