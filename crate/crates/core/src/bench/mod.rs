//! Benchmark harness: synthetic data, the desk model, metrics and
//! lesion/defense experiments.

pub mod dataset;
pub mod desk;
pub mod experiment;
pub mod train;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{gen_dataset, split, SyntheticDatasetSpec};
pub use desk::{Desk, DeskConfig};
pub use experiment::{
    brute_force_single_flip, competition_rank, defense_sweep, evaluate_plan, protection_registry, random_baseline, run_experiment, AttackMethod,
    BruteForceEntry, DefensePoint, ExperimentConfig,
};
pub use train::{train, DeskArch, TrainConfig, TrainLog};

pub const REPORT_SCHEMA: &str = "signlesion-report/1";

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `(hi + lo) / d` with the division remainder recovered by an FMA.
fn div_compensated(hi: f64, lo: f64, d: f64) -> f64 {
    let q = hi / d;
    let r = (-q).mul_add(d, hi);
    q + (r + lo) / d
}

/// Accuracy reduction `(acc0 − acc_k) / acc0`, evaluated in double-double
/// so that e.g. (0.8, 0.2) gives exactly 0.75.
pub fn ar(acc0: f64, acc_k: f64) -> Result<f64> {
    if acc0 <= 0.0 {
        return Err(Error::precondition("baseline accuracy is zero; AR undefined"));
    }
    let (hi, lo) = two_sum(acc0, -acc_k);
    Ok(div_compensated(hi, lo, acc0))
}

/// Mean of the AR values for k = 1..N, with a compensated sum.
pub fn mar(ars: &[f64]) -> Result<f64> {
    if ars.is_empty() {
        return Err(Error::precondition("mAR over an empty range"));
    }
    let (mut hi, mut lo) = (0.0, 0.0);
    for &x in ars {
        let (s, e) = two_sum(hi, x);
        hi = s;
        lo += e;
    }
    Ok(div_compensated(hi, lo, ars.len() as f64))
}

/// Nearest-rank percentile of an ascending slice, `p` in [0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPoint {
    pub k: usize,
    pub acc: f64,
    pub ar: f64,
    /// AR spread across seeds when the point aggregates several runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spread: Option<Spread>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub p05: f64,
    pub p50: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub k: usize,
    pub seed: u64,
    pub acc: f64,
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub method: String,
    #[serde(rename = "L")]
    pub layers: usize,
    pub seeds: Vec<u64>,
    pub baseline_acc: f64,
    pub per_k: Vec<KPoint>,
    /// Mean AR over the k ≥ 1 points; absent when there are none.
    pub mar: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub runs: Vec<RunRow>,
}

impl EvalReport {
    pub fn new(method: &str, layers: usize, baseline_acc: f64, seeds: Vec<u64>) -> Self {
        EvalReport {
            schema: REPORT_SCHEMA.into(),
            method: method.into(),
            layers,
            seeds,
            baseline_acc,
            per_k: Vec::new(),
            mar: None,
            runs: Vec::new(),
        }
    }

    pub fn push(&mut self, k: usize, acc: f64) -> Result<()> {
        let ar = ar(self.baseline_acc, acc)?;
        self.per_k.push(KPoint { k, acc, ar, spread: None });
        self.refresh_mar()
    }

    /// Records one accuracy per seed at flip count `k`; the aggregate point
    /// uses the mean accuracy.
    pub fn push_runs(&mut self, k: usize, runs: &[(u64, f64)]) -> Result<()> {
        if runs.is_empty() {
            return Err(Error::precondition("no runs to aggregate"));
        }
        let mut ars = Vec::with_capacity(runs.len());
        for &(seed, acc) in runs {
            let a = ar(self.baseline_acc, acc)?;
            ars.push(a);
            self.runs.push(RunRow { k, seed, acc, ar: a });
        }
        ars.sort_by(f64::total_cmp);
        let mean_acc = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
        self.per_k.push(KPoint {
            k,
            acc: mean_acc,
            ar: ar(self.baseline_acc, mean_acc)?,
            spread: Some(Spread {
                p05: percentile(&ars, 0.05),
                p50: percentile(&ars, 0.50),
                p95: percentile(&ars, 0.95),
            }),
        });
        self.refresh_mar()
    }

    fn refresh_mar(&mut self) -> Result<()> {
        let ars: Vec<f64> = self.per_k.iter().filter(|p| p.k > 0).map(|p| p.ar).collect();
        self.mar = if ars.is_empty() { None } else { Some(mar(&ars)?) };
        Ok(())
    }

    pub fn ar_at(&self, k: usize) -> Option<f64> {
        self.per_k.iter().find(|p| p.k == k).map(|p| p.ar)
    }

    /// mAR of each seed's own curve, ascending by seed order of first use.
    pub fn per_seed_mar(&self) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, Vec<f64>)> = Vec::new();
        for r in self.runs.iter().filter(|r| r.k > 0) {
            match out.iter_mut().find(|(s, _)| *s == r.seed) {
                Some((_, v)) => v.push(r.ar),
                None => out.push((r.seed, vec![r.ar])),
            }
        }
        out.into_iter()
            .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    }

    /// One row per (k, seed) run, or per k when there are no seed runs,
    /// followed by a `mAR@N` summary row whose acc column is the baseline.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# {} baseline_acc={}", self.schema, self.baseline_acc)?;
        writeln!(w, "method,L,k,seed,acc,ar")?;
        if self.runs.is_empty() {
            let seed = match self.seeds.as_slice() {
                [s] => s.to_string(),
                _ => String::new(),
            };
            for p in &self.per_k {
                writeln!(w, "{},{},{},{},{},{}", self.method, self.layers, p.k, seed, p.acc, p.ar)?;
            }
        } else {
            for r in &self.runs {
                writeln!(w, "{},{},{},{},{},{}", self.method, self.layers, r.k, r.seed, r.acc, r.ar)?;
            }
        }
        if let Some(m) = self.mar {
            let n = self.per_k.iter().map(|p| p.k).max().unwrap_or(0);
            writeln!(w, "{},{},mAR@{},,{},{}", self.method, self.layers, n, self.baseline_acc, m)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact value of a finite f64 as (mantissa, exponent) with odd or zero mantissa.
    fn exact(x: f64) -> (i128, i32) {
        if x == 0.0 {
            return (0, 0);
        }
        let bits = x.to_bits();
        let e = ((bits >> 52) & 0x7ff) as i32;
        let m = (bits & ((1 << 52) - 1)) as i128;
        let (mut m, mut e) = if e == 0 { (m, -1074) } else { (m | 1 << 52, e - 1075) };
        while m & 1 == 0 {
            m >>= 1;
            e += 1;
        }
        (if x < 0.0 { -m } else { m }, e)
    }

    /// Correctly rounded f64 of num / den for positive den, both exact integers.
    fn round_ratio(num: i128, den: i128) -> f64 {
        if num == 0 {
            return 0.0;
        }
        let neg = num < 0;
        let (mut n, d) = (num.unsigned_abs(), den as u128);
        let mut shift = 0i32;
        while n < d << 54 {
            n <<= 1;
            shift -= 1;
        }
        while n >= d << 55 {
            let sticky = n & 1;
            n = (n >> 1) | sticky;
            shift += 1;
        }
        let (q, rem) = (n / d, n % d);
        let mut mant = q >> 2;
        let guard = (q >> 1) & 1;
        let sticky = (q & 1) | u128::from(rem != 0);
        if guard == 1 && (sticky == 1 || mant & 1 == 1) {
            mant += 1;
        }
        let v = mant as f64 * 2f64.powi(shift + 2);
        if neg {
            -v
        } else {
            v
        }
    }

    /// Oracle: exact (a − b) / a over the f64 inputs, rounded once.
    fn ar_oracle(a: f64, b: f64) -> f64 {
        let ((ma, ea), (mb, eb)) = (exact(a), exact(b));
        let e = ea.min(eb);
        let num = (ma << (ea - e)) - (mb << (eb - e));
        // (num·2^e) / (ma·2^ea)
        if e >= ea {
            round_ratio(num << (e - ea), ma)
        } else {
            round_ratio(num, ma << (ea - e))
        }
    }

    #[test]
    fn ar_matches_exact_oracle() {
        for n in [7u32, 100, 512, 1000, 2000] {
            for c0 in (1..=n).step_by(13) {
                for ck in (0..=n).step_by(17) {
                    let (a, b) = (f64::from(c0) / f64::from(n), f64::from(ck) / f64::from(n));
                    assert_eq!(ar(a, b).unwrap(), ar_oracle(a, b), "{c0}/{n} {ck}/{n}");
                }
            }
        }
    }

    #[test]
    fn ar_examples() {
        assert_eq!(ar(0.80, 0.20).unwrap(), 0.75);
        assert_eq!(ar(0.9, 0.45).unwrap(), 0.5);
        assert_eq!(ar(0.8, 0.8).unwrap(), 0.0);
        assert!(ar(0.5, 0.6).unwrap() < 0.0);
        assert!(ar(0.0, 0.0).is_err());
    }

    #[test]
    fn mar_examples() {
        assert_eq!(mar(&[0.5, 1.0]).unwrap(), 0.75);
        assert_eq!(mar(&[0.1, 0.2, 0.3]).unwrap(), 0.2);
        assert!(mar(&[]).is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.05), 1.0);
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }

    #[test]
    fn report_tracks_mar_and_csv() {
        let mut r = EvalReport::new("dnl", 10, 0.5, vec![42]);
        r.push(1, 0.25).unwrap();
        r.push(2, 0.125).unwrap();
        assert_eq!(r.mar, Some(0.625));
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "method,L,k,seed,acc,ar");
        assert_eq!(lines[2], "dnl,10,1,42,0.25,0.5");
        assert_eq!(lines[4], "dnl,10,mAR@2,,0.5,0.625");
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn zero_flip_report_has_no_mar() {
        let mut r = EvalReport::new("stress", 4, 0.9, vec![1]);
        r.push(0, 0.9).unwrap();
        assert_eq!(r.mar, None);
        assert_eq!(r.per_k[0].ar, 0.0);
    }

    #[test]
    fn aggregated_runs() {
        let mut r = EvalReport::new("random", 10, 1.0, vec![1, 2]);
        r.push_runs(1, &[(1, 0.9), (2, 0.7)]).unwrap();
        r.push_runs(2, &[(1, 0.8), (2, 0.6)]).unwrap();
        assert!((r.per_k[0].acc - 0.8).abs() < 1e-12);
        let per_seed = r.per_seed_mar();
        assert_eq!(per_seed.len(), 2);
        assert!((per_seed[0].1 - 0.15).abs() < 1e-12);
        assert!((per_seed[1].1 - 0.35).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 2 + 4 + 1);
    }
}
