//! wasm-bindgen exports for the static page in `www/`. Every call returns a
//! JSON string; errors surface as JS exceptions.

pub mod lab;

use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js<T: Serialize>(r: lwta_meta::Result<T>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

/// Winner statistics of one block: softmax, hard-draw frequencies and the
/// mean relaxed indicator.
#[wasm_bindgen]
pub fn winner_frequencies(logits: Vec<f64>, tau: f64, draws: u32, seed: u32) -> Result<String, JsError> {
    to_js(lab::winner_frequencies(&logits, tau, draws as usize, u64::from(seed)))
}

#[wasm_bindgen]
pub struct SineLab {
    inner: lab::SineLab,
}

#[wasm_bindgen]
impl SineLab {
    #[wasm_bindgen(constructor)]
    pub fn new(settings: &str) -> Result<SineLab, JsError> {
        lab::SineLab::new(settings)
            .map(|inner| SineLab { inner })
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn train(&mut self, iters: u32) -> Result<String, JsError> {
        to_js(self.inner.train(u64::from(iters)))
    }

    pub fn fit(&self, amplitude: f64, phase: f64, shots: u32, seed: u32) -> Result<String, JsError> {
        to_js(self.inner.fit(amplitude, phase, shots as usize, u64::from(seed)))
    }

    pub fn compare_strategies(&self, tasks: u32, seed: u32) -> Result<String, JsError> {
        to_js(self.inner.compare_strategies(tasks as usize, u64::from(seed)))
    }
}
