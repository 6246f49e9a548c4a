//! WebAssembly bindings for `www/index.html`.
//!
//! Build with `cargo build -p cmtnet-web --release --target wasm32-unknown-unknown`
//! and generate the JS glue with `wasm-bindgen --target web --out-dir www/pkg`.

mod engine;

pub use engine::{demo_model, Engine};

use cmtnet::data::SynthParams;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    inner: Engine,
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(height: usize, width: usize, bands: usize, classes: usize, sigma: f64, seed: u32) -> Result<Demo, JsError> {
        let p = SynthParams {
            height,
            width,
            bands,
            classes,
            sigma,
            seed: seed as u64,
        };
        Ok(Demo {
            inner: Engine::new(&p).map_err(js)?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.inner.gt().height()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.inner.gt().width()
    }

    #[wasm_bindgen(getter)]
    pub fn bands(&self) -> usize {
        self.inner.bands()
    }

    #[wasm_bindgen(getter)]
    pub fn classes(&self) -> usize {
        self.inner.gt().num_classes()
    }

    /// `[r, g, b]` per class, flattened.
    #[wasm_bindgen(js_name = classColors)]
    pub fn class_colors(&self) -> Vec<u8> {
        self.inner.gt().palette().iter().flatten().copied().collect()
    }

    #[wasm_bindgen(js_name = groundTruthRgba)]
    pub fn ground_truth_rgba(&self) -> Vec<u8> {
        self.inner.ground_truth_rgba()
    }

    #[wasm_bindgen(js_name = classSpectra)]
    pub fn class_spectra(&self) -> Vec<f64> {
        self.inner.class_spectra()
    }

    /// Returns the number of training pixels drawn.
    #[wasm_bindgen(js_name = startTraining)]
    pub fn start_training(&mut self, fraction: f64, case: u8, lr: f64, seed: u32) -> Result<usize, JsError> {
        self.inner.start_training(fraction, case, lr, seed as u64).map_err(js)
    }

    #[wasm_bindgen(js_name = trainEpoch)]
    pub fn train_epoch(&mut self) -> Result<f64, JsError> {
        self.inner.train_epoch().map_err(js)
    }

    #[wasm_bindgen(getter, js_name = epochsDone)]
    pub fn epochs_done(&self) -> usize {
        self.inner.epochs_done()
    }

    /// `[OA, AA, kappa]` on the held-out pixels.
    pub fn evaluate(&mut self) -> Result<Vec<f64>, JsError> {
        self.inner.evaluate().map(|m| m.to_vec()).map_err(js)
    }

    #[wasm_bindgen(js_name = predictionRgba)]
    pub fn prediction_rgba(&self) -> Option<Vec<u8>> {
        self.inner.prediction_rgba()
    }
}
