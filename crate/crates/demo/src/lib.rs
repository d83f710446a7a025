//! Browser demo: a float bit explorer, a sign-flip damage curve on a small
//! in-browser model, and a before/after view of an attacked kernel.
//!
//! Every export returns a JSON string so the page stays plain JavaScript.

use serde_json::{json, Value};
use signlesion::bench::{gen_dataset, split, train, DeskArch, SyntheticDatasetSpec, TrainConfig};
use signlesion::bitkit::{decompose, flip_bit, FloatWord};
use signlesion::lesion::{plan_dnl, plan_random};
use signlesion::nnengine::{Dataset, FlipEvaluator, Model};
use signlesion::tensorstore::candidate_params;
use wasm_bindgen::prelude::*;

fn to_js(r: signlesion::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

fn word_json(w: FloatWord) -> Value {
    let f = decompose(w);
    json!({
        "bits": format!("{:032b}", w.0),
        "hex": format!("{:#010x}", w.0),
        "value": w.to_f32().to_string(),
        "sign": f.sign,
        "exponent": f.exponent,
        "mantissa": f.mantissa,
    })
}

/// Fields of `value` before and after toggling bit `pos` (0 = LSB).
pub fn explore_bits(value: f32, pos: u32) -> signlesion::Result<Value> {
    let w = FloatWord::from_f32(value);
    let flipped = flip_bit(w, pos)?;
    Ok(json!({"before": word_json(w), "after": word_json(flipped), "bit": pos}))
}

#[wasm_bindgen(js_name = exploreBits)]
pub fn explore_bits_js(value: f32, pos: u32) -> Result<String, JsError> {
    to_js(explore_bits(value, pos))
}

/// A small CNN trained on the synthetic patterns, with its held-out split.
#[wasm_bindgen]
pub struct Lab {
    model: Model,
    test: Dataset,
    first_loss: f32,
}

impl Lab {
    pub fn build(seed: u64) -> signlesion::Result<Lab> {
        let spec = SyntheticDatasetSpec {
            samples_per_class: 100,
            noise_sigma: 0.5,
            seed,
            ..SyntheticDatasetSpec::default()
        };
        let (train_set, test) = split(&gen_dataset(&spec)?);
        let arch = DeskArch {
            conv1: 4,
            conv2: 8,
            hidden: 48,
        };
        let (manifest, init) = arch.build(spec.image_size, spec.classes, seed)?;
        let cfg = TrainConfig {
            epochs: 10,
            lr: 0.02,
            seed,
            ..TrainConfig::default()
        };
        let (model, log) = train(&manifest, &init, &train_set, &cfg)?;
        Ok(Lab {
            model,
            test,
            first_loss: log.first_batch_loss,
        })
    }

    pub fn summary(&self) -> signlesion::Result<Value> {
        let eval = FlipEvaluator::new(self.model.network(), &self.test)?;
        let cands = candidate_params(&self.model.manifest, &self.model.params, usize::MAX)?;
        Ok(json!({
            "test_samples": self.test.len(),
            "test_acc": eval.baseline_accuracy(),
            "weights": cands.len(),
            "first_loss": self.first_loss,
        }))
    }

    /// Accuracy reduction after each of the first `k` DNL flips, next to the
    /// mean over `runs` random sign-flip sets of the same size.
    pub fn curve(&self, k: usize, layers: usize, runs: u64) -> signlesion::Result<Value> {
        let eval = FlipEvaluator::new(self.model.network(), &self.test)?;
        let base = eval.baseline_accuracy();
        let ar = |acc: f64| (base - acc) / base;
        let (m, a) = (&self.model.manifest, &self.model.params);
        let dnl = plan_dnl(m, a, k, layers)?.flip_pairs();
        let mut dnl_ar = Vec::with_capacity(k);
        for i in 1..=dnl.len() {
            dnl_ar.push(ar(eval.accuracy_with_flips(&dnl[..i])?));
        }
        let mut random_ar = vec![0.0; k];
        for seed in 0..runs {
            let flips = plan_random(m, a, k, seed, true, None)?.flip_pairs();
            for (i, slot) in random_ar.iter_mut().enumerate() {
                *slot += ar(eval.accuracy_with_flips(&flips[..=i])?) / runs as f64;
            }
        }
        Ok(json!({"baseline_acc": base, "dnl": dnl_ar, "random": random_ar}))
    }

    /// The kernel hit by DNL flip `index` (0-based, plan of `index + 1`
    /// flips over the first `layers` layers), before and after the flip.
    pub fn kernel_view(&self, index: usize, layers: usize) -> signlesion::Result<Value> {
        let (m, a) = (&self.model.manifest, &self.model.params);
        let plan = plan_dnl(m, a, index + 1, layers)?;
        let flip = &plan.flips[index];
        let cands = candidate_params(m, a, layers)?;
        let hit = cands
            .iter()
            .find(|c| c.coord == flip.coord)
            .ok_or_else(|| signlesion::Error::Precondition("flip outside the candidate set".into()))?;
        let kernel: Vec<_> = cands.iter().filter(|c| c.kernel == hit.kernel).collect();
        let before: Vec<f32> = kernel.iter().map(|c| c.value).collect();
        let after: Vec<f32> = kernel
            .iter()
            .map(|c| if c.coord == flip.coord { -c.value } else { c.value })
            .collect();
        Ok(json!({
            "tensor": flip.coord.tensor,
            "flat_index": flip.coord.flat_index,
            "layer": hit.kernel.param_layer_index,
            "kernel": hit.kernel.kernel_index,
            "position": kernel.iter().position(|c| c.coord == flip.coord),
            "before": before,
            "after": after,
        }))
    }
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new_js(seed: u32) -> Result<Lab, JsError> {
        Lab::build(u64::from(seed)).map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(js_name = summary)]
    pub fn summary_js(&self) -> Result<String, JsError> {
        to_js(self.summary())
    }

    #[wasm_bindgen(js_name = curve)]
    pub fn curve_js(&self, k: usize, layers: usize, runs: u32) -> Result<String, JsError> {
        to_js(self.curve(k, layers, u64::from(runs)))
    }

    #[wasm_bindgen(js_name = kernelView)]
    pub fn kernel_view_js(&self, index: usize, layers: usize) -> Result<String, JsError> {
        to_js(self.kernel_view(index, layers))
    }
}
