//! Compiled sequential network and its numeric kernels.
//!
//! Summation order (fixed, FP32 throughout):
//!
//! * linear: each output row is a dot product accumulated in 8 interleaved
//!   lanes (lane `j` takes elements `j, j+8, j+16, ...`), reduced as
//!   `((l0+l1)+(l2+l3))+((l4+l5)+(l6+l7))`, then the bias is added.
//! * conv2d: each output element accumulates `w * x` over
//!   `(in_channel, ky, kx)` in ascending order starting from `+0.0`,
//!   skipping padded positions; the bias is added last.
//! * maxpool2d: window scanned row-major; the first maximum wins.
//! * relu: `x > 0 ? x : 0`.
//!
//! Gradients accumulate in the same fixed loop orders, so results are
//! bit-reproducible on a given platform.

use crate::error::{Error, Result};
use crate::tensorstore::{ModelManifest, ResolvedOp, WeightArchive};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight_name: String,
    pub bias_name: Option<String>,
    pub weight: Vec<f32>,
    /// Zeros when the layer has no bias tensor.
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub(crate) ops: Vec<ResolvedOp>,
    pub(crate) params: Vec<Option<LayerParams>>,
    pub(crate) out_lens: Vec<usize>,
    pub(crate) input_len: usize,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) class_count: usize,
}

/// Per-layer parameter gradients, aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        ParamGrads {
            layers: net
                .params
                .iter()
                .map(|p| p.as_ref().map(|p| (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()])))
                .collect(),
        }
    }
}

impl Network {
    pub fn new(manifest: &ModelManifest, archive: &WeightArchive) -> Result<Self> {
        let resolved = manifest.resolve(archive)?;
        let mut ops = Vec::with_capacity(resolved.len());
        let mut params = Vec::with_capacity(resolved.len());
        let mut out_lens = Vec::with_capacity(resolved.len());
        for l in resolved {
            let p = match l.op {
                ResolvedOp::Conv2d { .. } | ResolvedOp::Linear { .. } => {
                    let weight_name = l.spec.weight_tensor.clone().expect("resolved weight");
                    let weight = archive.values(&weight_name)?;
                    let out = l.out_shape[0];
                    let bias = match &l.spec.bias_tensor {
                        Some(b) => archive.values(b)?,
                        None => vec![0.0; out],
                    };
                    Some(LayerParams {
                        weight_name,
                        bias_name: l.spec.bias_tensor.clone(),
                        weight,
                        bias,
                    })
                }
                _ => None,
            };
            out_lens.push(l.out_shape.iter().product());
            ops.push(l.op);
            params.push(p);
        }
        Ok(Network {
            ops,
            params,
            out_lens,
            input_len: manifest.input_shape.iter().product(),
            input_shape: manifest.input_shape.clone(),
            class_count: manifest.class_count,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layer_count(&self) -> usize {
        self.ops.len()
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    /// Writes the current weights and biases back into `archive`.
    pub fn export_into(&self, archive: &mut WeightArchive) -> Result<()> {
        for p in self.params.iter().flatten() {
            archive.set_values(&p.weight_name, &p.weight)?;
            if let Some(b) = &p.bias_name {
                archive.set_values(b, &p.bias)?;
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f32]) -> Result<()> {
        if input.len() != self.input_len {
            return Err(Error::Shape {
                expected: self.input_shape.clone(),
                got: vec![input.len()],
            });
        }
        Ok(())
    }

    /// Runs every layer, storing each layer's output in `acts`.
    pub fn forward_all(&self, input: &[f32], acts: &mut Vec<Vec<f32>>) -> Result<()> {
        self.check_input(input)?;
        acts.resize_with(self.ops.len(), Vec::new);
        for i in 0..self.ops.len() {
            let (done, rest) = acts.split_at_mut(i);
            let x = if i == 0 { input } else { &done[i - 1] };
            let out = &mut rest[0];
            out.resize(self.out_lens[i], 0.0);
            run_layer(&self.ops[i], self.params[i].as_ref(), x, out);
        }
        Ok(())
    }

    pub fn logits(&self, input: &[f32]) -> Result<Vec<f32>> {
        let mut acts = Vec::new();
        self.forward_all(input, &mut acts)?;
        Ok(acts.pop().unwrap_or_default())
    }

    /// Back-propagates `dlogits` through a recorded forward pass, adding the
    /// parameter gradients into `grads`.
    pub fn backward(&self, input: &[f32], acts: &[Vec<f32>], dlogits: &[f32], grads: &mut ParamGrads) {
        let mut g = dlogits.to_vec();
        let mut gin = Vec::new();
        for i in (0..self.ops.len()).rev() {
            let x = if i == 0 { input } else { &acts[i - 1] };
            let need_input_grad = i > 0;
            gin.clear();
            gin.resize(x.len(), 0.0);
            let pg = grads.layers[i].as_mut();
            backward_layer(&self.ops[i], self.params[i].as_ref(), x, &g, &mut gin, pg, need_input_grad);
            std::mem::swap(&mut g, &mut gin);
        }
    }
}

pub(crate) fn run_layer(op: &ResolvedOp, p: Option<&LayerParams>, x: &[f32], out: &mut [f32]) {
    match *op {
        ResolvedOp::Conv2d { out_channels, .. } => {
            let p = p.expect("conv params");
            for o in 0..out_channels {
                conv_channel(op, &p.weight, p.bias[o], o, x, out);
            }
        }
        ResolvedOp::Linear { out_features, .. } => {
            let p = p.expect("linear params");
            for r in 0..out_features {
                out[r] = linear_row(op, &p.weight, p.bias[r], r, x);
            }
        }
        ResolvedOp::Relu => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = relu(v);
            }
        }
        ResolvedOp::Flatten => out.copy_from_slice(x),
        ResolvedOp::MaxPool2d { .. } => maxpool(op, x, out),
    }
}

#[inline]
pub fn relu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn dot(w: &[f32], x: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let full = w.len() / 8 * 8;
    for (wc, xc) in w[..full].chunks_exact(8).zip(x[..full].chunks_exact(8)) {
        for j in 0..8 {
            acc[j] += wc[j] * xc[j];
        }
    }
    for j in 0..w.len() - full {
        acc[j] += w[full + j] * x[full + j];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Output `r` of a linear layer.
pub(crate) fn linear_row(op: &ResolvedOp, weight: &[f32], bias: f32, r: usize, x: &[f32]) -> f32 {
    let ResolvedOp::Linear { in_features, .. } = *op else { unreachable!() };
    dot(&weight[r * in_features..(r + 1) * in_features], x) + bias
}

/// Valid output range `lo..hi` along one axis for kernel tap `tap`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    // position = o*stride + tap - pad must lie in [0, in_len)
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    if in_len + pad <= tap {
        return (0, 0);
    }
    let hi = ((in_len + pad - tap - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Fills output channel `o` of a conv layer (into the full output buffer).
pub(crate) fn conv_channel(op: &ResolvedOp, weight: &[f32], bias: f32, o: usize, x: &[f32], out: &mut [f32]) {
    let ResolvedOp::Conv2d {
        in_channels,
        kernel: k,
        stride: s,
        padding: p,
        in_hw: (h, w),
        out_hw: (oh, ow),
        ..
    } = *op
    else {
        unreachable!()
    };
    let plane_out = &mut out[o * oh * ow..(o + 1) * oh * ow];
    plane_out.fill(0.0);
    let w_o = &weight[o * in_channels * k * k..(o + 1) * in_channels * k * k];
    for i in 0..in_channels {
        let plane = &x[i * h * w..(i + 1) * h * w];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(oh, h, s, p, ky);
            for kx in 0..k {
                let wv = w_o[(i * k + ky) * k + kx];
                let (x_lo, x_hi) = valid_range(ow, w, s, p, kx);
                for oy in y_lo..y_hi {
                    let iy = oy * s + ky - p;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut plane_out[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let off = x_lo + kx - p;
                        for (d, &v) in dst[x_lo..x_hi].iter_mut().zip(&src[off..off + (x_hi - x_lo)]) {
                            *d += wv * v;
                        }
                    } else {
                        for ox in x_lo..x_hi {
                            dst[ox] += wv * src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    for v in plane_out.iter_mut() {
        *v += bias;
    }
}

fn maxpool(op: &ResolvedOp, x: &[f32], out: &mut [f32]) {
    let ResolvedOp::MaxPool2d {
        channels,
        pool,
        stride,
        in_hw: (h, w),
        out_hw: (oh, ow),
    } = *op
    else {
        unreachable!()
    };
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                out[(c * oh + oy) * ow + ox] = plane[pool_argmax(plane, w, oy * stride, ox * stride, pool)];
            }
        }
    }
}

#[inline]
fn pool_argmax(plane: &[f32], w: usize, y0: usize, x0: usize, pool: usize) -> usize {
    let mut best = y0 * w + x0;
    for py in 0..pool {
        for px in 0..pool {
            let idx = (y0 + py) * w + x0 + px;
            if plane[idx] > plane[best] {
                best = idx;
            }
        }
    }
    best
}

fn backward_layer(
    op: &ResolvedOp,
    p: Option<&LayerParams>,
    x: &[f32],
    gout: &[f32],
    gin: &mut [f32],
    pg: Option<&mut (Vec<f32>, Vec<f32>)>,
    need_input_grad: bool,
) {
    match *op {
        ResolvedOp::Linear {
            in_features,
            out_features,
        } => {
            let p = p.expect("linear params");
            let (gw, gb) = pg.expect("linear grads");
            for r in 0..out_features {
                let g = gout[r];
                gb[r] += g;
                let row = r * in_features..(r + 1) * in_features;
                for (dw, &xv) in gw[row.clone()].iter_mut().zip(x) {
                    *dw += g * xv;
                }
                if need_input_grad {
                    for (gi, &wv) in gin.iter_mut().zip(&p.weight[row]) {
                        *gi += wv * g;
                    }
                }
            }
        }
        ResolvedOp::Conv2d {
            in_channels,
            out_channels,
            kernel: k,
            stride: s,
            padding: pad,
            in_hw: (h, w),
            out_hw: (oh, ow),
        } => {
            let p = p.expect("conv params");
            let (gw, gb) = pg.expect("conv grads");
            for o in 0..out_channels {
                let go = &gout[o * oh * ow..(o + 1) * oh * ow];
                gb[o] += go.iter().fold(0.0f32, |a, &b| a + b);
                for i in 0..in_channels {
                    let plane = &x[i * h * w..(i + 1) * h * w];
                    for ky in 0..k {
                        let (y_lo, y_hi) = valid_range(oh, h, s, pad, ky);
                        for kx in 0..k {
                            let widx = ((o * in_channels + i) * k + ky) * k + kx;
                            let wv = p.weight[widx];
                            let (x_lo, x_hi) = valid_range(ow, w, s, pad, kx);
                            let mut acc = 0.0f32;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - pad;
                                for ox in x_lo..x_hi {
                                    let ix = ox * s + kx - pad;
                                    let g = go[oy * ow + ox];
                                    acc += g * plane[iy * w + ix];
                                    if need_input_grad {
                                        gin[i * h * w + iy * w + ix] += wv * g;
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        ResolvedOp::Relu => {
            for ((gi, &g), &v) in gin.iter_mut().zip(gout).zip(x) {
                *gi = if v > 0.0 { g } else { 0.0 };
            }
        }
        ResolvedOp::Flatten => gin.copy_from_slice(gout),
        ResolvedOp::MaxPool2d {
            channels,
            pool,
            stride,
            in_hw: (h, w),
            out_hw: (oh, ow),
        } => {
            for c in 0..channels {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let a = pool_argmax(plane, w, oy * stride, ox * stride, pool);
                        gin[c * h * w + a] += gout[(c * oh + oy) * ow + ox];
                    }
                }
            }
        }
    }
}

/// Index of the largest logit; ties go to the smaller class index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
