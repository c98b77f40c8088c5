//! WebAssembly exports for the demo page in `www/`. Every export returns a
//! JSON string; failures become JavaScript exceptions.

pub mod demo;

use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(r: xmodnet::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn film_explorer(seed: u32, partner: u32, gamma0: f64, beta0: f64) -> Result<String, JsError> {
    to_json(demo::film_explorer(seed.into(), partner.into(), gamma0, beta0))
}

#[wasm_bindgen]
pub fn matching_head(query: &[f64], supports: &[f64], labels: &[u32], way: u32) -> Result<String, JsError> {
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    to_json(demo::matching_head(query, supports, &labels, way as usize))
}

#[wasm_bindgen]
pub fn classify_synthetic(seed: u32, way: u32, gate: f64, noise_std: f64) -> Result<String, JsError> {
    to_json(demo::classify_synthetic(seed.into(), way as usize, gate, noise_std))
}
