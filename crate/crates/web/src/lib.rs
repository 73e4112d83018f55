//! WebAssembly bindings for the browser demo in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: ffm::error::FfmError) -> JsError {
    JsError::new(&e.to_string())
}

/// Real parts then imaginary parts of a decaying, rotating impulse.
#[wasm_bindgen]
pub fn impulse_response(alpha: f64, period: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    demo::impulse_response(alpha, period, steps).map_err(js)
}

/// Trace durabilities then context periods after initialization. Pass
/// `lo = hi = 0` for the default schedule.
#[wasm_bindgen]
pub fn init_timescales(m: usize, c: usize, t_e: usize, beta: f64, lo: f64, hi: f64) -> Result<Vec<f64>, JsError> {
    let horizon = (hi > 0.0).then_some((lo, hi));
    demo::init_timescales(m, c, t_e, beta, horizon).map_err(js)
}

/// Per-step gap between the parallel and recurrent forms.
#[wasm_bindgen]
pub fn scan_vs_step(m: usize, c: usize, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    demo::scan_vs_step(m, c, steps, seed).map_err(js)
}
