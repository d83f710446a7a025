use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnengine::{Dataset, Model, Network, ParamGrads};
use crate::rng::{permutation, streams, Philox};
use crate::tensorstore::{LayerSpec, ModelManifest, WeightArchive};

/// Channel/width knobs of the desk CNN:
/// conv(3×3, pad 1) → relu → pool 2 → conv(3×3, pad 1) → relu → pool 2 →
/// flatten → linear → relu → linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskArch {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for DeskArch {
    fn default() -> Self {
        DeskArch {
            conv1: 8,
            conv2: 16,
            hidden: 192,
        }
    }
}

impl DeskArch {
    pub fn manifest(&self, image_size: usize, classes: usize) -> ModelManifest {
        let mut m = ModelManifest {
            input_shape: vec![1, image_size, image_size],
            class_count: classes,
            layers: vec![
                LayerSpec::conv2d("conv1", 3, 1, 1),
                LayerSpec::relu("relu1"),
                LayerSpec::maxpool2d("pool1", 2),
                LayerSpec::conv2d("conv2", 3, 1, 1),
                LayerSpec::relu("relu2"),
                LayerSpec::maxpool2d("pool2", 2),
                LayerSpec::flatten("flatten"),
                LayerSpec::linear("fc1"),
                LayerSpec::relu("relu3"),
                LayerSpec::linear("fc2"),
            ],
        };
        m.assign_param_indices().expect("fresh manifest");
        m
    }

    /// Manifest plus seeded initial parameters.
    pub fn build(&self, image_size: usize, classes: usize, seed: u64) -> Result<(ModelManifest, WeightArchive)> {
        let flat = self.conv2 * (image_size / 4) * (image_size / 4);
        let shapes: [(&str, Vec<usize>); 4] = [
            ("conv1", vec![self.conv1, 1, 3, 3]),
            ("conv2", vec![self.conv2, self.conv1, 3, 3]),
            ("fc1", vec![self.hidden, flat]),
            ("fc2", vec![classes, self.hidden]),
        ];
        let mut a = WeightArchive::new();
        for (i, (name, shape)) in shapes.iter().enumerate() {
            let w = init_weights(shape, seed, i as u32 + 1, i + 1 == shapes.len());
            a.push_tensor(&format!("{name}.weight"), shape, &w)?;
            a.push_tensor(&format!("{name}.bias"), &shape[..1], &vec![0.0; shape[0]])?;
        }
        Ok((self.manifest(image_size, classes), a))
    }
}

/// He-normal weights (std √(2/fan_in)); the output layer uses a tenth of
/// the LeCun scale so initial logits are near-uniform.
pub fn init_weights(shape: &[usize], seed: u64, layer: u32, output_layer: bool) -> Vec<f32> {
    let fan_in: usize = shape[1..].iter().product();
    let std = if output_layer {
        0.1 * (1.0 / fan_in as f32).sqrt()
    } else {
        (2.0 / fan_in as f32).sqrt()
    };
    let g = Philox::new(seed, streams::with_sub(streams::INIT, layer));
    let n: usize = shape.iter().product();
    (0..n as u64).map(|i| std * g.normal_at(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub first_batch_loss: f32,
    pub epoch_losses: Vec<f32>,
}

/// Softmax cross-entropy; writes dL/dlogits scaled by `scale`.
pub fn softmax_xent(logits: &[f32], label: usize, scale: f32, grad: &mut [f32]) -> f32 {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = logits.iter().map(|&z| f64::from(z - m).exp()).sum();
    let lse = f64::from(m) + sum.ln();
    for (i, (g, &z)) in grad.iter_mut().zip(logits).enumerate() {
        let p = (f64::from(z) - lse).exp() as f32;
        *g = scale * (p - if i == label { 1.0 } else { 0.0 });
    }
    (lse - f64::from(logits[label])) as f32
}

/// Minibatch SGD with momentum (`v ← μv + g`, `θ ← θ − lr·v`) on mean
/// softmax cross-entropy. Epoch `e` visits the training set in the order of
/// a Fisher–Yates permutation from shuffle stream `e`.
pub fn train(manifest: &ModelManifest, init: &WeightArchive, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::precondition("training needs data and a positive batch size"));
    }
    let mut net = Network::new(manifest, init)?;
    let mut velocity = ParamGrads::zeros_like(&net);
    let mut log = TrainLog::default();
    let mut acts = Vec::new();
    let mut dlogits = vec![0.0f32; net.class_count()];
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = permutation(
            &mut Philox::new(cfg.seed, streams::with_sub(streams::SHUFFLE, epoch as u32)).reader(),
            data.len(),
        );
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch) {
            let mut grads = ParamGrads::zeros_like(&net);
            let scale = 1.0 / batch.len() as f32;
            let mut loss = 0.0f32;
            for &i in batch {
                let x = data.sample(i);
                net.forward_all(x, &mut acts)?;
                loss += softmax_xent(acts.last().unwrap(), data.labels[i], scale, &mut dlogits);
                net.backward(x, &acts, &dlogits, &mut grads);
            }
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            if step == 0 {
                log.first_batch_loss = loss;
            }
            epoch_loss += f64::from(loss) * batch.len() as f64;
            sgd_step(&mut net, &mut velocity, &grads, cfg);
            step += 1;
        }
        log.epoch_losses.push((epoch_loss / data.len() as f64) as f32);
    }
    let mut archive = init.clone();
    net.export_into(&mut archive)?;
    Ok((Model::new(manifest.clone(), archive)?, log))
}

fn sgd_step(net: &mut Network, velocity: &mut ParamGrads, grads: &ParamGrads, cfg: &TrainConfig) {
    for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
        let (Some(p), Some((vw, vb)), Some((gw, gb))) = (p, v, g) else { continue };
        for ((w, v), g) in p.weight.iter_mut().zip(vw).zip(gw) {
            *v = cfg.momentum * *v + g;
            *w -= cfg.lr * *v;
        }
        for ((b, v), g) in p.bias.iter_mut().zip(vb).zip(gb) {
            *v = cfg.momentum * *v + g;
            *b -= cfg.lr * *v;
        }
    }
}
