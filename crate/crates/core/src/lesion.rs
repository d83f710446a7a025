//! Flip planners and the flip applicator.
//!
//! * [`plan_dnl`]: pass-free; rank first-L weights by |θ|, take the top
//!   entry of each not-yet-used kernel until k flips are chosen.
//! * [`plan_1p_dnl`]: same selection over the hybrid score computed from
//!   one forward/backward pass on Gaussian noise.
//! * [`plan_magnitude_unconstrained`]: global top-k |θ|, no kernel constraint.
//! * [`plan_random`]: seeded uniform baseline.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bitkit::{flip_bit, SIGN_BIT};
use crate::error::{Error, Result};
use crate::nnengine::{grad_sum_logits, Model};
use crate::rng::{sample_without_replacement, streams, Philox};
use crate::scoring::{score_hybrid, score_magnitude, ScoreTable};
use crate::tensorstore::{candidate_params, KernelId, ModelManifest, ParamCoord, WeightArchive};

pub const DEFAULT_LAYERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flip {
    #[serde(flatten)]
    pub coord: ParamCoord,
    pub bit: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipPlan {
    pub method: String,
    pub k: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub seed: Option<u64>,
    pub flips: Vec<Flip>,
}

impl FlipPlan {
    /// The first `k` flips, as a plan of its own.
    pub fn prefix(&self, k: usize) -> FlipPlan {
        let k = k.min(self.flips.len());
        FlipPlan {
            k,
            flips: self.flips[..k].to_vec(),
            ..self.clone()
        }
    }

    pub fn flip_pairs(&self) -> Vec<(ParamCoord, u32)> {
        self.flips.iter().map(|f| (f.coord.clone(), f.bit)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: FlipPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.flips.len() != self.k {
            return Err(Error::precondition(format!(
                "plan declares k={} but lists {} flips",
                self.k,
                self.flips.len()
            )));
        }
        let mut seen = HashSet::new();
        for f in &self.flips {
            if f.bit > 31 {
                return Err(Error::BitPosition(f.bit));
            }
            if !seen.insert(f) {
                return Err(Error::precondition(format!(
                    "duplicate flip {}[{}] bit {}",
                    f.coord.tensor, f.coord.flat_index, f.bit
                )));
            }
        }
        Ok(())
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::precondition("k must be positive"));
    }
    Ok(())
}

/// Greedy top-k over a score table; with `one_per_kernel`, entries of an
/// already used kernel are skipped.
pub fn select_top_k(table: &ScoreTable, k: usize, one_per_kernel: bool) -> Result<Vec<ParamCoord>> {
    check_k(k)?;
    let available = if one_per_kernel {
        table.entries.iter().map(|e| e.candidate.kernel).collect::<HashSet<_>>().len()
    } else {
        table.len()
    };
    if k > available {
        let what = if one_per_kernel { "kernels" } else { "candidates" };
        return Err(Error::precondition(format!(
            "k={k} exceeds the {available} {what} available"
        )));
    }
    let mut used: HashSet<KernelId> = HashSet::new();
    let mut out = Vec::with_capacity(k);
    for e in table.ranked() {
        if out.len() == k {
            break;
        }
        if one_per_kernel && !used.insert(e.candidate.kernel) {
            continue;
        }
        out.push(e.candidate.coord.clone());
    }
    Ok(out)
}

fn sign_plan(method: &str, k: usize, layers: usize, seed: Option<u64>, coords: Vec<ParamCoord>) -> FlipPlan {
    FlipPlan {
        method: method.to_string(),
        k,
        layers,
        seed,
        flips: coords.into_iter().map(|coord| Flip { coord, bit: SIGN_BIT }).collect(),
    }
}

/// Pass-free attack: never touches the inference engine.
pub fn plan_dnl(m: &ModelManifest, a: &WeightArchive, k: usize, layers: usize) -> Result<FlipPlan> {
    let table = score_magnitude(&candidate_params(m, a, layers)?);
    Ok(sign_plan("dnl", k, layers, None, select_top_k(&table, k, true)?))
}

/// Single-pass attack: one forward and one backward traversal.
pub fn plan_1p_dnl(model: &Model, k: usize, layers: usize, seed: u64, alpha: f32, beta: f32) -> Result<FlipPlan> {
    let cands = candidate_params(&model.manifest, &model.params, layers)?;
    check_k(k)?;
    let g = grad_sum_logits(model, seed);
    let table = score_hybrid(&cands, &g, alpha, beta)?;
    Ok(sign_plan("1p_dnl", k, layers, Some(seed), select_top_k(&table, k, true)?))
}

/// Global top-k |θ| over the first `layers` layers, ignoring kernels.
pub fn plan_magnitude_unconstrained(m: &ModelManifest, a: &WeightArchive, k: usize, layers: usize) -> Result<FlipPlan> {
    let table = score_magnitude(&candidate_params(m, a, layers)?);
    Ok(sign_plan("magnitude_unconstrained", k, layers, None, select_top_k(&table, k, false)?))
}

/// Uniform sample of `k` candidates without replacement (all layers unless
/// `restrict_layers`). Bits are 31 when `sign_only`, else uniform in 0..32
/// drawn after the indices from the same stream.
pub fn plan_random(
    m: &ModelManifest,
    a: &WeightArchive,
    k: usize,
    seed: u64,
    sign_only: bool,
    restrict_layers: Option<usize>,
) -> Result<FlipPlan> {
    let layers = restrict_layers.unwrap_or(usize::MAX);
    let cands = candidate_params(m, a, layers)?;
    if k > cands.len() {
        return Err(Error::precondition(format!(
            "k={k} exceeds the population of {} candidates",
            cands.len()
        )));
    }
    let mut reader = Philox::new(seed, streams::PLAN).reader();
    let picks = sample_without_replacement(&mut reader, cands.len(), k);
    let flips = picks
        .into_iter()
        .map(|i| Flip {
            coord: cands[i].coord.clone(),
            bit: SIGN_BIT,
        })
        .collect::<Vec<_>>();
    let flips = if sign_only {
        flips
    } else {
        flips
            .into_iter()
            .map(|f| Flip {
                bit: reader.below(32) as u32,
                ..f
            })
            .collect()
    };
    Ok(FlipPlan {
        method: if sign_only { "random".into() } else { "random_bits".into() },
        k,
        layers: restrict_layers.unwrap_or_else(|| m.param_layer_count()),
        seed: Some(seed),
        flips,
    })
}

/// Copy of `a` with every planned bit toggled.
pub fn apply(plan: &FlipPlan, a: &WeightArchive) -> Result<WeightArchive> {
    let mut out = a.clone();
    apply_in_place(plan, &mut out)?;
    Ok(out)
}

pub fn apply_in_place(plan: &FlipPlan, a: &mut WeightArchive) -> Result<()> {
    for f in &plan.flips {
        let w = a.word(&f.coord.tensor, f.coord.flat_index)?;
        a.set_word(&f.coord.tensor, f.coord.flat_index, flip_bit(w, f.bit)?)?;
    }
    Ok(())
}
