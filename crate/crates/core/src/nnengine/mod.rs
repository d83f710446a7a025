//! Deterministic inference and reverse-mode gradients for small sequential CNNs.
//!
//! Every forward or backward traversal through a [`Model`] bumps a monotone
//! counter, so callers can verify pass budgets.

mod incremental;
mod network;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

pub use incremental::FlipEvaluator;
pub use network::{argmax, dot, relu, LayerParams, Network, ParamGrads};

use crate::error::{Error, Result};
use crate::rng::{streams, Philox};
use crate::tensorstore::{ModelManifest, ParamCoord, WeightArchive};

/// Labeled samples stored as one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_shape: Vec<usize>,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(input_shape: Vec<usize>, inputs: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = input_shape.iter().product();
        if per == 0 || inputs.len() != per * labels.len() {
            return Err(Error::Shape {
                expected: vec![labels.len(), per],
                got: vec![inputs.len()],
            });
        }
        Ok(Dataset {
            input_shape,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            input_shape: self.input_shape.clone(),
            inputs,
            labels,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

#[derive(Debug, Default)]
pub struct PassCounters {
    forward: AtomicU64,
    backward: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCount {
    pub forward: u64,
    pub backward: u64,
}

impl PassCount {
    pub fn since(self, earlier: PassCount) -> PassCount {
        PassCount {
            forward: self.forward - earlier.forward,
            backward: self.backward - earlier.backward,
        }
    }
}

impl PassCounters {
    pub fn snapshot(&self) -> PassCount {
        PassCount {
            forward: self.forward.load(Ordering::SeqCst),
            backward: self.backward.load(Ordering::SeqCst),
        }
    }

    fn bump_forward(&self) {
        self.forward.fetch_add(1, Ordering::SeqCst);
    }

    fn bump_backward(&self) {
        self.backward.fetch_add(1, Ordering::SeqCst);
    }
}

/// A manifest, its parameters, and the compiled network built from them.
#[derive(Debug)]
pub struct Model {
    pub manifest: ModelManifest,
    pub params: WeightArchive,
    net: Network,
    counters: Arc<PassCounters>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            manifest: self.manifest.clone(),
            params: self.params.clone(),
            net: self.net.clone(),
            counters: Arc::default(),
        }
    }
}

impl Model {
    pub fn new(manifest: ModelManifest, params: WeightArchive) -> Result<Self> {
        let net = Network::new(&manifest, &params)?;
        Ok(Model {
            manifest,
            params,
            net,
            counters: Arc::default(),
        })
    }

    /// Same topology with a different archive (e.g. after a flip plan).
    /// Traversals of the result are counted on this model's counters.
    pub fn with_params(&self, params: WeightArchive) -> Result<Self> {
        let net = Network::new(&self.manifest, &params)?;
        Ok(Model {
            manifest: self.manifest.clone(),
            params,
            net,
            counters: Arc::clone(&self.counters),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn counters(&self) -> PassCount {
        self.counters.snapshot()
    }

    /// One forward traversal on a single input.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        self.counters.bump_forward();
        self.net.logits(input)
    }

    pub fn predict(&self, input: &[f32]) -> Result<usize> {
        Ok(argmax(&self.forward(input)?))
    }
}

/// Fraction of samples whose argmax logit (ties toward the smaller class
/// index) equals the label. Counts one forward traversal per sample.
pub fn accuracy(m: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::precondition("accuracy needs a non-empty dataset"));
    }
    let hits: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|i| m.predict(data.sample(i)).map(|p| p == data.labels[i]))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// ∂R/∂θ for every weight and bias tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSnapshot {
    pub grads: BTreeMap<String, Vec<f32>>,
}

impl GradientSnapshot {
    pub fn get(&self, c: &ParamCoord) -> Option<f32> {
        self.grads.get(&c.tensor).and_then(|g| g.get(c.flat_index)).copied()
    }

    pub fn zeros_for(net: &Network) -> Self {
        let mut grads = BTreeMap::new();
        for p in net.params().iter().flatten() {
            grads.insert(p.weight_name.clone(), vec![0.0; p.weight.len()]);
            if let Some(b) = &p.bias_name {
                grads.insert(b.clone(), vec![0.0; p.bias.len()]);
            }
        }
        GradientSnapshot { grads }
    }

    fn from_param_grads(net: &Network, pg: ParamGrads) -> Self {
        let mut grads = BTreeMap::new();
        for (p, g) in net.params().iter().zip(pg.layers) {
            if let (Some(p), Some((gw, gb))) = (p, g) {
                grads.insert(p.weight_name.clone(), gw);
                if let Some(b) = &p.bias_name {
                    grads.insert(b.clone(), gb);
                }
            }
        }
        GradientSnapshot { grads }
    }

    pub fn max_abs(&self) -> f32 {
        self.grads.values().flatten().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// `batch` standard-normal inputs drawn from the seeded generator; element
/// `j` of sample `b` is normal number `b * input_len + j` of the stream.
pub fn gaussian_inputs(input_len: usize, seed: u64, batch: usize) -> Vec<f32> {
    let g = Philox::new(seed, streams::GAUSS_INPUT);
    (0..(input_len * batch) as u64).map(|i| g.normal_at(i)).collect()
}

/// Gradient of R = Σ logits on one Gaussian input.
pub fn grad_sum_logits(m: &Model, seed: u64) -> GradientSnapshot {
    grad_sum_logits_batch(m, seed, 1)
}

/// As [`grad_sum_logits`], with R summed over a batch of Gaussian inputs.
/// The whole batch counts as one forward and one backward traversal.
pub fn grad_sum_logits_batch(m: &Model, seed: u64, batch: usize) -> GradientSnapshot {
    m.counters.bump_forward();
    m.counters.bump_backward();
    sum_logit_grads(&m.net, seed, batch)
}

fn sum_logit_grads(net: &Network, seed: u64, batch: usize) -> GradientSnapshot {
    let n = net.input_len();
    let inputs = gaussian_inputs(n, seed, batch.max(1));
    let mut pg = ParamGrads::zeros_like(net);
    let ones = vec![1.0f32; net.class_count()];
    let mut acts = Vec::new();
    for x in inputs.chunks_exact(n) {
        net.forward_all(x, &mut acts).expect("input length fixed by the network");
        net.backward(x, &acts, &ones, &mut pg);
    }
    GradientSnapshot::from_param_grads(net, pg)
}

/// Hessian-vector product `H·v` of R = Σ logits, approximated by a central
/// difference of gradients: `(∇R(θ + εv) − ∇R(θ − εv)) / 2ε` with
/// `ε = 1e-3 / max|v|`. Costs two forward and two backward traversals.
pub fn hessian_vector_fd(m: &Model, seed: u64, v: &GradientSnapshot) -> GradientSnapshot {
    let vmax = v.max_abs();
    if vmax == 0.0 {
        return GradientSnapshot::zeros_for(&m.net);
    }
    let eps = 1e-3 / vmax;
    let shifted = |sign: f32| {
        let mut net = m.net.clone();
        for p in net.params_mut().iter_mut().flatten() {
            if let Some(dw) = v.grads.get(&p.weight_name) {
                for (w, d) in p.weight.iter_mut().zip(dw) {
                    *w += sign * eps * d;
                }
            }
            if let Some(db) = p.bias_name.as_ref().and_then(|b| v.grads.get(b)) {
                for (b, d) in p.bias.iter_mut().zip(db) {
                    *b += sign * eps * d;
                }
            }
        }
        m.counters.bump_forward();
        m.counters.bump_backward();
        sum_logit_grads(&net, seed, 1)
    };
    let plus = shifted(1.0);
    let minus = shifted(-1.0);
    let grads = plus
        .grads
        .into_iter()
        .map(|(name, gp)| {
            let gm = &minus.grads[&name];
            let hv = gp.iter().zip(gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            (name, hv)
        })
        .collect();
    GradientSnapshot { grads }
}
