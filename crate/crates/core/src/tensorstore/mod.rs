//! Weight archives, the model manifest, and the attackable candidate set.

mod archive;
mod manifest;

use serde::{Deserialize, Serialize};

pub use archive::{read_archive, write_archive, Dtype, TensorRecord, WeightArchive};
pub use manifest::{LayerKind, LayerSpec, ModelManifest, ResolvedLayer, ResolvedOp};

use crate::error::{Error, Result};

/// One scalar parameter: tensor name plus row-major flat index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamCoord {
    pub tensor: String,
    pub flat_index: usize,
}

impl ParamCoord {
    pub fn new(tensor: impl Into<String>, flat_index: usize) -> Self {
        ParamCoord {
            tensor: tensor.into(),
            flat_index,
        }
    }
}

/// A conv kernel is one 2-D slice per (out, in) channel pair; a linear
/// kernel is one output row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KernelId {
    pub param_layer_index: usize,
    pub kernel_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub coord: ParamCoord,
    pub kernel: KernelId,
    pub value: f32,
}

/// Weight elements (biases excluded) of the first `l` parameterized layers,
/// in (layer, flat_index) order. `l` beyond the layer count means all layers.
pub fn candidate_params(m: &ModelManifest, a: &WeightArchive, l: usize) -> Result<Vec<Candidate>> {
    if l < 1 {
        return Err(Error::precondition("L must be at least 1"));
    }
    let resolved = m.resolve(a)?;
    let mut out = Vec::new();
    for layer in &resolved {
        let (Some(idx), Some(klen)) = (layer.param_layer_index, layer.kernel_len()) else {
            continue;
        };
        if idx > l {
            break;
        }
        let name = layer.spec.weight_tensor.as_deref().expect("resolved layers own a weight");
        for (i, v) in a.values(name)?.into_iter().enumerate() {
            out.push(Candidate {
                coord: ParamCoord::new(name, i),
                kernel: KernelId {
                    param_layer_index: idx,
                    kernel_index: i / klen,
                },
                value: v,
            });
        }
    }
    Ok(out)
}
