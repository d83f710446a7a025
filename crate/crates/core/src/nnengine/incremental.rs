//! Accuracy under a small set of bit flips, reusing cached activations.
//!
//! Layers before the first flipped layer are read from the cache; in the
//! first flipped layer only the touched output channels (conv) or rows
//! (linear) are recomputed; everything after it runs in full. The touched
//! channels are recomputed with the same kernels as a full forward pass, so
//! predictions are bit-identical to applying the flips and re-running
//! [`super::accuracy`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::network::{argmax, conv_channel, linear_row, run_layer, LayerParams, Network};
use super::Dataset;
use crate::error::{Error, Result};
use crate::tensorstore::{ParamCoord, ResolvedOp};

pub struct FlipEvaluator<'a> {
    net: &'a Network,
    data: &'a Dataset,
    cache: Vec<Vec<Vec<f32>>>,
    baseline_correct: usize,
    tensors: HashMap<&'a str, (usize, bool)>,
}

impl<'a> FlipEvaluator<'a> {
    pub fn new(net: &'a Network, data: &'a Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::precondition("evaluation set is empty"));
        }
        let mut cache = Vec::with_capacity(data.len());
        let mut baseline_correct = 0;
        for i in 0..data.len() {
            let mut acts = Vec::new();
            net.forward_all(data.sample(i), &mut acts)?;
            if argmax(acts.last().unwrap()) == data.labels[i] {
                baseline_correct += 1;
            }
            cache.push(acts);
        }
        let mut tensors = HashMap::new();
        for (layer, p) in net.params().iter().enumerate() {
            if let Some(p) = p {
                tensors.insert(p.weight_name.as_str(), (layer, false));
                if let Some(b) = &p.bias_name {
                    tensors.insert(b.as_str(), (layer, true));
                }
            }
        }
        Ok(FlipEvaluator {
            net,
            data,
            cache,
            baseline_correct,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn baseline_accuracy(&self) -> f64 {
        self.baseline_correct as f64 / self.data.len() as f64
    }

    /// Accuracy of the network with every `(coord, bit)` flipped once.
    pub fn accuracy_with_flips(&self, flips: &[(ParamCoord, u32)]) -> Result<f64> {
        Ok(self.correct_with_flips(flips)? as f64 / self.data.len() as f64)
    }

    pub fn correct_with_flips(&self, flips: &[(ParamCoord, u32)]) -> Result<usize> {
        if flips.is_empty() {
            return Ok(self.baseline_correct);
        }
        // layer -> flipped (is_bias, index, bit)
        let mut by_layer: BTreeMap<usize, Vec<(bool, usize, u32)>> = BTreeMap::new();
        for (c, bit) in flips {
            let &(layer, is_bias) = self.tensors.get(c.tensor.as_str()).ok_or_else(|| Error::Coordinate {
                tensor: c.tensor.clone(),
                index: c.flat_index,
            })?;
            let p = self.net.params()[layer].as_ref().unwrap();
            let len = if is_bias { p.bias.len() } else { p.weight.len() };
            if c.flat_index >= len {
                return Err(Error::Coordinate {
                    tensor: c.tensor.clone(),
                    index: c.flat_index,
                });
            }
            if *bit > 31 {
                return Err(Error::BitPosition(*bit));
            }
            by_layer.entry(layer).or_default().push((is_bias, c.flat_index, *bit));
        }

        let mut overrides: BTreeMap<usize, LayerParams> = BTreeMap::new();
        for (&layer, fl) in &by_layer {
            let mut p = self.net.params()[layer].clone().unwrap();
            for &(is_bias, idx, bit) in fl {
                let v = if is_bias { &mut p.bias[idx] } else { &mut p.weight[idx] };
                *v = f32::from_bits(v.to_bits() ^ (1 << bit));
            }
            overrides.insert(layer, p);
        }

        let (&first, first_flips) = by_layer.iter().next().unwrap();
        let first_op = &self.net.ops[first];
        let channel_len = match *first_op {
            ResolvedOp::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            ResolvedOp::Linear { in_features, .. } => in_features,
            _ => unreachable!("only parameterized layers own tensors"),
        };
        let channels: BTreeSet<usize> = first_flips
            .iter()
            .map(|&(is_bias, idx, _)| if is_bias { idx } else { idx / channel_len })
            .collect();
        let first_params = &overrides[&first];

        let mut correct = 0;
        let mut cur = Vec::new();
        let mut next = Vec::new();
        for s in 0..self.data.len() {
            let acts = &self.cache[s];
            let x_in: &[f32] = if first == 0 { self.data.sample(s) } else { &acts[first - 1] };
            cur.clear();
            cur.extend_from_slice(&acts[first]);
            for &ch in &channels {
                match first_op {
                    ResolvedOp::Conv2d { .. } => {
                        conv_channel(first_op, &first_params.weight, first_params.bias[ch], ch, x_in, &mut cur)
                    }
                    _ => cur[ch] = linear_row(first_op, &first_params.weight, first_params.bias[ch], ch, x_in),
                }
            }
            for j in first + 1..self.net.ops.len() {
                next.clear();
                next.resize(self.net.out_lens[j], 0.0);
                let p = overrides.get(&j).or(self.net.params()[j].as_ref());
                run_layer(&self.net.ops[j], p, &cur, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            if argmax(&cur) == self.data.labels[s] {
                correct += 1;
            }
        }
        Ok(correct)
    }
}
