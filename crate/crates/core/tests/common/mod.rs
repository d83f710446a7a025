//! Test-side oracles shared by the integration targets.

#![allow(dead_code)]

use std::collections::HashMap;

use signlesion::nnengine::{gaussian_inputs, grad_sum_logits, Model};
use signlesion::tensorstore::{LayerKind, ParamCoord};

type Params = HashMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(PartialEq)]
struct Pattern {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

fn params64(model: &Model) -> Params {
    model
        .params
        .names()
        .map(|n| {
            let r = model.params.get(n).unwrap();
            let v = model.params.values(n).unwrap().iter().map(|&x| f64::from(x)).collect();
            (n.to_string(), (r.shape.clone(), v))
        })
        .collect()
}

/// Straightforward f64 forward pass; returns Σ logits and the relu/maxpool pattern.
fn forward64(model: &Model, p: &Params, x: &[f64]) -> (f64, Pattern) {
    let m = &model.manifest;
    let (mut c, mut h, mut w) = (m.input_shape[0], m.input_shape[1], m.input_shape[2]);
    let mut a = x.to_vec();
    let mut pat = Pattern { relu: vec![], pool: vec![] };
    for l in &m.layers {
        let hp = |k: &str, d: usize| l.hyperparams.get(k).copied().unwrap_or(d);
        match l.kind {
            LayerKind::Conv2d => {
                let (shape, wt) = &p[l.weight_tensor.as_ref().unwrap()];
                let bias = l.bias_tensor.as_ref().map(|b| &p[b].1);
                let (o, k) = (shape[0], shape[2]);
                let (s, pad) = (hp("stride", 1), hp("padding", 0));
                let oh = (h + 2 * pad - k) / s + 1;
                let ow = (w + 2 * pad - k) / s + 1;
                let mut out = vec![0.0; o * oh * ow];
                for oc in 0..o {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = bias.map_or(0.0, |b| b[oc]);
                            for ic in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (y * s + ky) as isize - pad as isize;
                                        let ix = (xx * s + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        acc += wt[((oc * c + ic) * k + ky) * k + kx]
                                            * a[(ic * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            out[(oc * oh + y) * ow + xx] = acc;
                        }
                    }
                }
                a = out;
                c = o;
                h = oh;
                w = ow;
            }
            LayerKind::Linear => {
                let (shape, wt) = &p[l.weight_tensor.as_ref().unwrap()];
                let bias = l.bias_tensor.as_ref().map(|b| &p[b].1);
                let (o, i) = (shape[0], shape[1]);
                a = (0..o)
                    .map(|r| bias.map_or(0.0, |b| b[r]) + (0..i).map(|j| wt[r * i + j] * a[j]).sum::<f64>())
                    .collect();
                c = o;
                h = 1;
                w = 1;
            }
            LayerKind::Relu => {
                pat.relu.push(a.iter().map(|&v| v > 0.0).collect());
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            LayerKind::Maxpool2d => {
                let pool = hp("pool_size", 2);
                let s = hp("stride", pool);
                let (oh, ow) = ((h - pool) / s + 1, (w - pool) / s + 1);
                let mut out = vec![0.0; c * oh * ow];
                let mut arg = vec![0; c * oh * ow];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
                            for py in 0..pool {
                                for px in 0..pool {
                                    let idx = (ch * h + y * s + py) * w + xx * s + px;
                                    if a[idx] > best {
                                        best = a[idx];
                                        bi = idx;
                                    }
                                }
                            }
                            out[(ch * oh + y) * ow + xx] = best;
                            arg[(ch * oh + y) * ow + xx] = bi;
                        }
                    }
                }
                pat.pool.push(arg);
                a = out;
                h = oh;
                w = ow;
            }
            LayerKind::Flatten => {
                c *= h * w;
                h = 1;
                w = 1;
            }
        }
    }
    (a.iter().sum(), pat)
}

pub struct XorShift(pub u64);

impl XorShift {
    pub fn below(&mut self, n: usize) -> usize {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 % n as u64) as usize
    }
}

pub struct FdSummary {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Compares `grad_sum_logits` with central differences of the f64 pass at
/// up to `per_tensor` sampled coordinates of every tensor. Coordinates
/// whose ±h perturbation changes a relu or maxpool decision are skipped.
pub fn fd_check(model: &Model, seed: u64, per_tensor: usize, rel_tol: f64) -> FdSummary {
    let grads = grad_sum_logits(model, seed);
    let x: Vec<f64> = gaussian_inputs(model.network().input_len(), seed, 1)
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let base = params64(model);
    let (_, base_pattern) = forward64(model, &base, &x);
    let mut rng = XorShift(0x9e37_79b9_7f4a_7c15);
    let mut s = FdSummary {
        checked: 0,
        skipped: 0,
        worst_rel: 0.0,
        failures: vec![],
    };
    let mut names: Vec<&String> = base.keys().collect();
    names.sort();
    for name in names {
        let n = base[name].1.len();
        for _ in 0..per_tensor.min(n) {
            let i = rng.below(n);
            let theta = base[name].1[i];
            let h = 1e-3 * theta.abs().max(1.0);
            let mut p = base.clone();
            p.get_mut(name).unwrap().1[i] = theta + h;
            let (plus, pat_p) = forward64(model, &p, &x);
            p.get_mut(name).unwrap().1[i] = theta - h;
            let (minus, pat_m) = forward64(model, &p, &x);
            if pat_p != base_pattern || pat_m != base_pattern {
                s.skipped += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * h);
            let coord = ParamCoord {
                tensor: name.clone(),
                flat_index: i,
            };
            let g = f64::from(grads.get(&coord).expect("gradient present"));
            let rel = (g - fd).abs() / fd.abs().max(1e-6);
            s.worst_rel = s.worst_rel.max(rel);
            if rel >= rel_tol {
                s.failures.push(format!("{name}[{i}]: analytic {g} vs fd {fd} (rel {rel:e})"));
            }
            s.checked += 1;
        }
    }
    s
}
