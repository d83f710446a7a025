//! Per-parameter saliency scores over a candidate set.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnengine::GradientSnapshot;
use crate::tensorstore::Candidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Magnitude,
    Hybrid,
    Grasp,
    GraspGn,
    Synflow,
    Obd,
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMethod::Magnitude => "magnitude",
            ScoreMethod::Hybrid => "hybrid",
            ScoreMethod::Grasp => "grasp",
            ScoreMethod::GraspGn => "grasp_gn",
            ScoreMethod::Synflow => "synflow",
            ScoreMethod::Obd => "obd",
        })
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "magnitude" => ScoreMethod::Magnitude,
            "hybrid" => ScoreMethod::Hybrid,
            "grasp" => ScoreMethod::Grasp,
            "grasp_gn" => ScoreMethod::GraspGn,
            "synflow" => ScoreMethod::Synflow,
            "obd" => ScoreMethod::Obd,
            other => return Err(Error::Config(format!("unknown score method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredParam {
    pub candidate: Candidate,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub entries: Vec<ScoredParam>,
    pub method: ScoreMethod,
    pub alpha: f32,
    pub beta: f32,
}

/// Descending score; ties by (param layer, tensor name, flat index) ascending.
pub fn rank_order(a: &ScoredParam, b: &ScoredParam) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.candidate.kernel.param_layer_index.cmp(&b.candidate.kernel.param_layer_index))
        .then_with(|| a.candidate.coord.tensor.cmp(&b.candidate.coord.tensor))
        .then(a.candidate.coord.flat_index.cmp(&b.candidate.coord.flat_index))
}

impl ScoreTable {
    fn build(cands: &[Candidate], method: ScoreMethod, alpha: f32, beta: f32, f: impl Fn(&Candidate) -> Result<f64>) -> Result<Self> {
        let entries = cands
            .iter()
            .map(|c| {
                Ok(ScoredParam {
                    candidate: c.clone(),
                    score: f(c)? as f32,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ScoreTable {
            entries,
            method,
            alpha,
            beta,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by [`rank_order`].
    pub fn ranked(&self) -> Vec<&ScoredParam> {
        let mut v: Vec<&ScoredParam> = self.entries.iter().collect();
        v.sort_by(|a, b| rank_order(a, b));
        v
    }

    /// CSV with columns `tensor,flat_index,layer,kernel,score,value`, in rank order.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "tensor,flat_index,layer,kernel,score,value")?;
        for e in self.ranked() {
            let c = &e.candidate;
            writeln!(
                w,
                "{},{},{},{},{:e},{:e}",
                c.coord.tensor, c.coord.flat_index, c.kernel.param_layer_index, c.kernel.kernel_index, e.score, c.value
            )?;
        }
        Ok(())
    }
}

fn grad_of(g: &GradientSnapshot, c: &Candidate) -> Result<f64> {
    g.get(&c.coord).map(f64::from).ok_or_else(|| {
        Error::precondition(format!(
            "no gradient for {}[{}]",
            c.coord.tensor, c.coord.flat_index
        ))
    })
}

/// S(θ) = |θ|.
pub fn score_magnitude(cands: &[Candidate]) -> ScoreTable {
    ScoreTable::build(cands, ScoreMethod::Magnitude, 1.0, 0.0, |c| Ok(f64::from(c.value.abs())))
        .expect("magnitude scoring is infallible")
}

/// S(θ) = α|θ| + β|θg + ½θ²H| with the Gauss–Newton diagonal H = g².
pub fn score_hybrid(cands: &[Candidate], g: &GradientSnapshot, alpha: f32, beta: f32) -> Result<ScoreTable> {
    let (a, b) = (f64::from(alpha), f64::from(beta));
    ScoreTable::build(cands, ScoreMethod::Hybrid, alpha, beta, |c| {
        let t = f64::from(c.value);
        let gi = grad_of(g, c)?;
        let second = if b == 0.0 { 0.0 } else { b * (t * gi + 0.5 * t * t * gi * gi).abs() };
        Ok(a * t.abs() + second)
    })
}

/// Pruning-literature scores:
///
/// * `grasp`: |θ · (Hg)| with `hv` the Hessian-vector product H·g
/// * `grasp_gn`: |θ · g² · g|, i.e. H ≈ diag(g²)
/// * `synflow`: |g · θ|
/// * `obd`: ½ θ² g²
pub fn score_ablation(
    kind: ScoreMethod,
    cands: &[Candidate],
    g: &GradientSnapshot,
    hv: Option<&GradientSnapshot>,
) -> Result<ScoreTable> {
    match kind {
        ScoreMethod::Grasp => {
            let hv = hv.ok_or_else(|| Error::precondition("grasp needs a Hessian-vector product"))?;
            ScoreTable::build(cands, kind, 0.0, 1.0, |c| Ok((f64::from(c.value) * grad_of(hv, c)?).abs()))
        }
        ScoreMethod::GraspGn => ScoreTable::build(cands, kind, 0.0, 1.0, |c| {
            let gi = grad_of(g, c)?;
            Ok((f64::from(c.value) * gi * gi * gi).abs())
        }),
        ScoreMethod::Synflow => {
            ScoreTable::build(cands, kind, 0.0, 1.0, |c| Ok((grad_of(g, c)? * f64::from(c.value)).abs()))
        }
        ScoreMethod::Obd => ScoreTable::build(cands, kind, 0.0, 1.0, |c| {
            let (t, gi) = (f64::from(c.value), grad_of(g, c)?);
            Ok(0.5 * t * t * gi * gi)
        }),
        other => Err(Error::precondition(format!("{other} is not an ablation score"))),
    }
}
