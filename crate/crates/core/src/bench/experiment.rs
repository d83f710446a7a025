use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ar, EvalReport};
use crate::error::{Error, Result};
use crate::lesion::{
    apply_in_place, plan_1p_dnl, plan_dnl, plan_magnitude_unconstrained, plan_random, FlipPlan,
};
use crate::nnengine::{accuracy, Dataset, FlipEvaluator, Model};
use crate::scoring::score_magnitude;
use crate::shield::{
    encode, protected_count, select_protected, select_protected_random, stress_against, ProtectionRegistry, Scheme, Selection,
    SignSidecar,
};
use crate::tensorstore::{candidate_params, ParamCoord};

/// Largest candidate population the brute-force oracle will sweep.
pub const BRUTE_FORCE_LIMIT: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Dnl,
    #[serde(rename = "1p_dnl")]
    OnePDnl,
    Random,
    MagnitudeUnconstrained,
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::Dnl => "dnl",
            AttackMethod::OnePDnl => "1p_dnl",
            AttackMethod::Random => "random",
            AttackMethod::MagnitudeUnconstrained => "magnitude_unconstrained",
        })
    }
}

impl FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dnl" => Ok(AttackMethod::Dnl),
            "1p_dnl" | "1p-dnl" => Ok(AttackMethod::OnePDnl),
            "random" => Ok(AttackMethod::Random),
            "magnitude_unconstrained" => Ok(AttackMethod::MagnitudeUnconstrained),
            other => Err(Error::Config(format!("unknown attack method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: AttackMethod,
    /// Largest flip count; the curve covers k = 1..=n.
    pub n: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    /// Random plan seeds, or the Gaussian-input seed (first entry) for 1P-DNL.
    pub seeds: Vec<u64>,
    pub alpha: f32,
    pub beta: f32,
}

/// Attack curve for k = 1..=n. Deterministic planners evaluate cumulative
/// prefixes of one plan on the full apply/evaluate/restore path; random
/// plans are evaluated per seed with the cached-activation evaluator.
pub fn run_experiment(model: &Model, data: &Dataset, cfg: &ExperimentConfig) -> Result<EvalReport> {
    if cfg.n == 0 {
        let baseline = accuracy(model, data)?;
        let mut r = EvalReport::new(&cfg.method.to_string(), cfg.layers, baseline, cfg.seeds.clone());
        r.push(0, baseline)?;
        return Ok(r);
    }
    let (m, a) = (&model.manifest, &model.params);
    let plan = match cfg.method {
        AttackMethod::Dnl => plan_dnl(m, a, cfg.n, cfg.layers)?,
        AttackMethod::MagnitudeUnconstrained => plan_magnitude_unconstrained(m, a, cfg.n, cfg.layers)?,
        AttackMethod::OnePDnl => {
            let seed = *cfg
                .seeds
                .first()
                .ok_or_else(|| Error::Config("1p_dnl needs a Gaussian-input seed".into()))?;
            plan_1p_dnl(model, cfg.n, cfg.layers, seed, cfg.alpha, cfg.beta)?
        }
        AttackMethod::Random => {
            return random_baseline(model, data, cfg.n, Some(cfg.layers), &cfg.seeds);
        }
    };
    evaluate_plan(model, data, &plan, None)
}

/// Accuracy after each cumulative prefix of `plan`. The working copy is
/// restored after every prefix and checked bytewise against the original.
pub fn evaluate_plan(model: &Model, data: &Dataset, plan: &FlipPlan, baseline: Option<f64>) -> Result<EvalReport> {
    let baseline = match baseline {
        Some(b) => b,
        None => accuracy(model, data)?,
    };
    let mut report = EvalReport::new(&plan.method, plan.layers, baseline, plan.seed.into_iter().collect());
    let pristine = model.params.data_bytes();
    let mut working = model.params.clone();
    for k in 1..=plan.k {
        let prefix = plan.prefix(k);
        apply_in_place(&prefix, &mut working)?;
        let attacked = model.with_params(working)?;
        let acc = accuracy(&attacked, data)?;
        working = attacked.params;
        apply_in_place(&prefix, &mut working)?;
        if working.data_bytes() != pristine {
            return Err(Error::precondition(format!("restoration failed after prefix k={k}")));
        }
        report.push(k, acc)?;
    }
    Ok(report)
}

/// Per-seed random sign-flip curves: seed `s` draws one plan of size `n`
/// and its prefixes give k = 1..=n.
pub fn random_baseline(
    model: &Model,
    data: &Dataset,
    n: usize,
    restrict_layers: Option<usize>,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Config("random baseline needs at least one seed".into()));
    }
    let eval = FlipEvaluator::new(model.network(), data)?;
    let plans = seeds
        .iter()
        .map(|&s| plan_random(&model.manifest, &model.params, n, s, true, restrict_layers))
        .collect::<Result<Vec<_>>>()?;
    let layers = plans[0].layers;
    let accs: Vec<Vec<f64>> = plans
        .par_iter()
        .map(|p| {
            let pairs = p.flip_pairs();
            (1..=n).map(|k| eval.accuracy_with_flips(&pairs[..k])).collect()
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport::new("random", layers, eval.baseline_accuracy(), seeds.to_vec());
    for k in 1..=n {
        let runs: Vec<(u64, f64)> = seeds.iter().zip(&accs).map(|(&s, a)| (s, a[k - 1])).collect();
        report.push_runs(k, &runs)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceEntry {
    pub coord: ParamCoord,
    pub param_layer_index: usize,
    pub correct: usize,
    pub acc: f64,
    pub ar: f64,
}

/// Single sign flip of every candidate weight in the first `layers` layers,
/// ranked by AR descending (ties keep layer, tensor, index order).
pub fn brute_force_single_flip(model: &Model, data: &Dataset, layers: usize) -> Result<Vec<BruteForceEntry>> {
    let cands = candidate_params(&model.manifest, &model.params, layers)?;
    if cands.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::precondition(format!(
            "{} candidates exceed the brute-force limit of {BRUTE_FORCE_LIMIT}",
            cands.len()
        )));
    }
    let eval = FlipEvaluator::new(model.network(), data)?;
    let base = eval.baseline_accuracy();
    let n = eval.len() as f64;
    let mut out = cands
        .par_iter()
        .map(|c| {
            let correct = eval.correct_with_flips(&[(c.coord.clone(), crate::bitkit::SIGN_BIT)])?;
            let acc = correct as f64 / n;
            Ok(BruteForceEntry {
                coord: c.coord.clone(),
                param_layer_index: c.kernel.param_layer_index,
                correct,
                acc,
                ar: ar(base, acc)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        a.correct
            .cmp(&b.correct)
            .then(a.param_layer_index.cmp(&b.param_layer_index))
            .then_with(|| a.coord.cmp(&b.coord))
    });
    Ok(out)
}

/// Standard competition rank (1 + number of strictly more damaging flips).
pub fn competition_rank(ranking: &[BruteForceEntry], coord: &ParamCoord) -> Option<usize> {
    let target = ranking.iter().find(|e| &e.coord == coord)?;
    Some(1 + ranking.iter().filter(|e| e.correct < target.correct).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefensePoint {
    pub selection: Option<Selection>,
    pub fraction: f64,
    pub protected: usize,
    pub mean_ar: f64,
    pub ars: Vec<f64>,
}

/// Registry over every weight: largest magnitudes first, or a seeded
/// uniform subset.
pub fn protection_registry(model: &Model, fraction: f32, selection: Selection, seed: u64) -> Result<ProtectionRegistry> {
    let cands = candidate_params(&model.manifest, &model.params, usize::MAX)?;
    match selection {
        Selection::ByScore => select_protected(&score_magnitude(&cands), fraction),
        Selection::Random => {
            let pop: Vec<ParamCoord> = cands.into_iter().map(|c| c.coord).collect();
            select_protected_random(&pop, fraction, seed)
        }
    }
}

/// Post-repair AR of a `flip_fraction` sign-flip barrage, averaged over
/// `seeds`, for no protection and each protection fraction. Every
/// configuration sees the same barrage for a given seed.
pub fn defense_sweep(
    model: &Model,
    data: &Dataset,
    scheme: Scheme,
    selection: Selection,
    fractions: &[f64],
    selection_seed: u64,
    flip_fraction: f64,
    seeds: &[u64],
) -> Result<Vec<DefensePoint>> {
    if seeds.is_empty() {
        return Err(Error::Config("defense sweep needs at least one stress seed".into()));
    }
    let population = candidate_params(&model.manifest, &model.params, usize::MAX)?.len();
    let n_flips = protected_count(flip_fraction as f32, population)?;
    let baseline = accuracy(model, data)?;
    let mut configs: Vec<(f64, Option<(ProtectionRegistry, SignSidecar)>)> = vec![(0.0, None)];
    for &f in fractions {
        let r = protection_registry(model, f as f32, selection, selection_seed)?;
        let s = encode(&model.params, &r, scheme)?;
        configs.push((f, Some((r, s))));
    }
    configs
        .iter()
        .map(|(fraction, cfg)| {
            let ars = seeds
                .iter()
                .map(|&seed| {
                    let prot = cfg.as_ref().map(|(r, s)| (r, s));
                    let rep = stress_against(model, data, baseline, prot, n_flips, seed, true)?;
                    Ok(rep.per_k[0].ar)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(DefensePoint {
                selection: cfg.as_ref().map(|(r, _)| r.selection),
                fraction: *fraction,
                protected: cfg.as_ref().map_or(0, |(r, _)| r.len()),
                mean_ar: super::mar(&ars)?,
                ars,
            })
        })
        .collect()
}
