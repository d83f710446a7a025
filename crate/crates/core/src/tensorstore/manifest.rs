use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::archive::WeightArchive;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Linear,
    Relu,
    Maxpool2d,
    Flatten,
}

impl LayerKind {
    pub fn is_parameterized(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Linear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_tensor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_tensor: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hyperparams: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_layer_index: Option<usize>,
}

impl LayerSpec {
    fn simple(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            weight_tensor: None,
            bias_tensor: None,
            hyperparams: BTreeMap::new(),
            param_layer_index: None,
        }
    }

    pub fn conv2d(name: &str, kernel_size: usize, stride: usize, padding: usize) -> Self {
        let mut l = Self::simple(name, LayerKind::Conv2d);
        l.weight_tensor = Some(format!("{name}.weight"));
        l.bias_tensor = Some(format!("{name}.bias"));
        l.hyperparams.insert("kernel_size".into(), kernel_size);
        l.hyperparams.insert("stride".into(), stride);
        l.hyperparams.insert("padding".into(), padding);
        l
    }

    pub fn linear(name: &str) -> Self {
        let mut l = Self::simple(name, LayerKind::Linear);
        l.weight_tensor = Some(format!("{name}.weight"));
        l.bias_tensor = Some(format!("{name}.bias"));
        l
    }

    pub fn relu(name: &str) -> Self {
        Self::simple(name, LayerKind::Relu)
    }

    pub fn maxpool2d(name: &str, pool_size: usize) -> Self {
        let mut l = Self::simple(name, LayerKind::Maxpool2d);
        l.hyperparams.insert("pool_size".into(), pool_size);
        l
    }

    pub fn flatten(name: &str) -> Self {
        Self::simple(name, LayerKind::Flatten)
    }

    fn hp(&self, key: &str) -> Option<usize> {
        self.hyperparams.get(key).copied()
    }
}

/// Ordered sequential topology. Only `conv2d` and `linear` layers carry
/// parameters; they are numbered 1, 2, 3, ... in forward order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

/// A layer with its shapes and geometry resolved against an archive.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedOp {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool2d {
        channels: usize,
        pool: usize,
        stride: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub op: ResolvedOp,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub param_layer_index: Option<usize>,
}

impl ResolvedLayer {
    /// Number of weight elements per kernel (2-D slice for conv, row for linear).
    pub fn kernel_len(&self) -> Option<usize> {
        match self.op {
            ResolvedOp::Conv2d { kernel, .. } => Some(kernel * kernel),
            ResolvedOp::Linear { in_features, .. } => Some(in_features),
            _ => None,
        }
    }
}

fn mferr(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

impl ModelManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: ModelManifest = serde_json::from_str(text)?;
        m.assign_param_indices()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// Fills in missing `param_layer_index` values and rejects inconsistent ones.
    pub fn assign_param_indices(&mut self) -> Result<()> {
        let mut next = 1;
        for l in &mut self.layers {
            if l.kind.is_parameterized() {
                match l.param_layer_index {
                    Some(i) if i != next => {
                        return Err(mferr(format!(
                            "layer {:?} declares param_layer_index {i}, expected {next}",
                            l.name
                        )))
                    }
                    _ => l.param_layer_index = Some(next),
                }
                next += 1;
            } else if l.param_layer_index.is_some() {
                return Err(mferr(format!("layer {:?} has no parameters but declares an index", l.name)));
            }
        }
        Ok(())
    }

    pub fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.is_parameterized()).count()
    }

    /// Walks the topology, checking every referenced tensor against `archive`.
    pub fn resolve(&self, archive: &WeightArchive) -> Result<Vec<ResolvedLayer>> {
        if self.class_count == 0 {
            return Err(mferr("class_count must be positive"));
        }
        let mut m = self.clone();
        m.assign_param_indices()?;
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(mferr(format!("invalid input_shape {shape:?}")));
        }
        let mut out = Vec::with_capacity(m.layers.len());
        for l in &m.layers {
            let in_shape = shape.clone();
            let op = match l.kind {
                LayerKind::Conv2d => {
                    let [c, h, w] = in_shape[..] else {
                        return Err(mferr(format!("conv2d {:?} needs a [C,H,W] input, got {in_shape:?}", l.name)));
                    };
                    let wshape = tensor_shape(archive, l.weight_tensor.as_deref(), &l.name)?;
                    let [o, i, kh, kw] = wshape[..] else {
                        return Err(mferr(format!("conv2d {:?} weight must be rank 4, got {wshape:?}", l.name)));
                    };
                    if i != c || kh != kw || l.hp("kernel_size").is_some_and(|k| k != kh) {
                        return Err(Error::Shape {
                            expected: vec![o, c, l.hp("kernel_size").unwrap_or(kh), l.hp("kernel_size").unwrap_or(kh)],
                            got: wshape,
                        });
                    }
                    check_bias(archive, l, o)?;
                    let stride = l.hp("stride").unwrap_or(1);
                    let padding = l.hp("padding").unwrap_or(0);
                    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kh {
                        return Err(mferr(format!("conv2d {:?}: invalid geometry", l.name)));
                    }
                    let oh = (h + 2 * padding - kh) / stride + 1;
                    let ow = (w + 2 * padding - kh) / stride + 1;
                    shape = vec![o, oh, ow];
                    ResolvedOp::Conv2d {
                        in_channels: c,
                        out_channels: o,
                        kernel: kh,
                        stride,
                        padding,
                        in_hw: (h, w),
                        out_hw: (oh, ow),
                    }
                }
                LayerKind::Linear => {
                    let [n] = in_shape[..] else {
                        return Err(mferr(format!("linear {:?} needs a flat input, got {in_shape:?}", l.name)));
                    };
                    let wshape = tensor_shape(archive, l.weight_tensor.as_deref(), &l.name)?;
                    let [o, i] = wshape[..] else {
                        return Err(mferr(format!("linear {:?} weight must be rank 2, got {wshape:?}", l.name)));
                    };
                    if i != n {
                        return Err(Error::Shape { expected: vec![o, n], got: wshape });
                    }
                    check_bias(archive, l, o)?;
                    shape = vec![o];
                    ResolvedOp::Linear {
                        in_features: n,
                        out_features: o,
                    }
                }
                LayerKind::Relu => ResolvedOp::Relu,
                LayerKind::Flatten => {
                    shape = vec![shape.iter().product()];
                    ResolvedOp::Flatten
                }
                LayerKind::Maxpool2d => {
                    let [c, h, w] = in_shape[..] else {
                        return Err(mferr(format!("maxpool2d {:?} needs a [C,H,W] input", l.name)));
                    };
                    let pool = l
                        .hp("pool_size")
                        .filter(|&p| p > 0)
                        .ok_or_else(|| mferr(format!("maxpool2d {:?} needs pool_size", l.name)))?;
                    let stride = l.hp("stride").unwrap_or(pool);
                    if stride == 0 || h < pool || w < pool {
                        return Err(mferr(format!("maxpool2d {:?}: invalid geometry", l.name)));
                    }
                    let oh = (h - pool) / stride + 1;
                    let ow = (w - pool) / stride + 1;
                    shape = vec![c, oh, ow];
                    ResolvedOp::MaxPool2d {
                        channels: c,
                        pool,
                        stride,
                        in_hw: (h, w),
                        out_hw: (oh, ow),
                    }
                }
            };
            if !l.kind.is_parameterized() && (l.weight_tensor.is_some() || l.bias_tensor.is_some()) {
                return Err(mferr(format!("layer {:?} of kind {:?} cannot own tensors", l.name, l.kind)));
            }
            out.push(ResolvedLayer {
                spec: l.clone(),
                op,
                in_shape,
                out_shape: shape.clone(),
                param_layer_index: l.param_layer_index,
            });
        }
        if shape != [self.class_count] {
            return Err(Error::Shape {
                expected: vec![self.class_count],
                got: shape,
            });
        }
        Ok(out)
    }
}

fn tensor_shape(archive: &WeightArchive, name: Option<&str>, layer: &str) -> Result<Vec<usize>> {
    let name = name.ok_or_else(|| mferr(format!("layer {layer:?} has no weight_tensor")))?;
    archive
        .get(name)
        .map(|r| r.shape.clone())
        .ok_or_else(|| mferr(format!("tensor {name:?} of layer {layer:?} missing from archive")))
}

fn check_bias(archive: &WeightArchive, l: &LayerSpec, out: usize) -> Result<()> {
    if let Some(b) = &l.bias_tensor {
        let shape = archive
            .get(b)
            .map(|r| r.shape.clone())
            .ok_or_else(|| mferr(format!("bias {b:?} of layer {:?} missing from archive", l.name)))?;
        if shape != [out] {
            return Err(Error::Shape { expected: vec![out], got: shape });
        }
    }
    Ok(())
}
