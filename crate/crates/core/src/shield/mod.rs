//! Selective sign-bit protection.
//!
//! A [`ProtectionRegistry`] names the protected weights; a [`SignSidecar`]
//! holds redundancy for exactly their sign bits, either as three replicas
//! per bit or as SEC-DED check bits over 57-bit blocks.

pub mod hamming;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{ar, EvalReport};
use crate::bitkit::{FloatWord, SIGN_BIT};
use crate::error::{Error, Result};
use crate::lesion::{apply_in_place, plan_random};
use crate::nnengine::{accuracy, Dataset, Model};
use crate::rng::{sample_without_replacement, streams, Philox};
use crate::scoring::ScoreTable;
use crate::tensorstore::{ParamCoord, WeightArchive};

/// Protection fractions swept by default.
pub const FRACTION_GRID: [f32; 4] = [0.01, 0.05, 0.10, 0.20];

const SIDECAR_MAGIC: &[u8; 4] = b"NLSB";
const SIDECAR_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ByScore,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionRegistry {
    pub selection: Selection,
    pub fraction: f32,
    pub seed: Option<u64>,
    pub protected: Vec<ParamCoord>,
}

/// `ceil(fraction * n)`, forgiving the representation error of `fraction`
/// as an f32 (so 1/3 of 3 is 1, not 2).
pub fn protected_count(fraction: f32, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::precondition(format!("fraction {fraction} outside (0, 1]")));
    }
    let x = f64::from(fraction) * n as f64;
    let count = (x - x * 1e-6).ceil() as usize;
    Ok(count.clamp(usize::from(n > 0), n))
}

impl ProtectionRegistry {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ProtectionRegistry = serde_json::from_str(text)?;
        let mut seen = std::collections::HashSet::new();
        if !r.protected.iter().all(|c| seen.insert(c)) {
            return Err(Error::Sidecar("registry lists a parameter twice".into()));
        }
        Ok(r)
    }

    /// SHA-256 of the registry file as written by [`Self::save`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.protected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protected.is_empty()
    }
}

/// Top `ceil(fraction * N)` parameters by score (standard tie-break).
pub fn select_protected(scores: &ScoreTable, fraction: f32) -> Result<ProtectionRegistry> {
    let n = protected_count(fraction, scores.len())?;
    Ok(ProtectionRegistry {
        selection: Selection::ByScore,
        fraction,
        seed: None,
        protected: scores.ranked().into_iter().take(n).map(|e| e.candidate.coord.clone()).collect(),
    })
}

/// Uniform random subset of `population`, in draw order.
pub fn select_protected_random(population: &[ParamCoord], fraction: f32, seed: u64) -> Result<ProtectionRegistry> {
    let n = protected_count(fraction, population.len())?;
    let mut reader = Philox::new(seed, streams::PROTECT).reader();
    let picks = sample_without_replacement(&mut reader, population.len(), n);
    Ok(ProtectionRegistry {
        selection: Selection::Random,
        fraction,
        seed: Some(seed),
        protected: picks.into_iter().map(|i| population[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Replicate3,
    HammingSecded,
}

impl Scheme {
    fn code(self) -> u8 {
        match self {
            Scheme::Replicate3 => 0,
            Scheme::HammingSecded => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Scheme::Replicate3),
            1 => Ok(Scheme::HammingSecded),
            other => Err(Error::Sidecar(format!("unknown scheme code {other}"))),
        }
    }

    /// Payload length in bits for `n` protected signs.
    pub fn payload_bits(self, n: usize) -> usize {
        match self {
            Scheme::Replicate3 => 3 * n,
            Scheme::HammingSecded => hamming_blocks(n) * hamming::CHECK_BITS,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replicate3" => Ok(Scheme::Replicate3),
            "hamming_secded" => Ok(Scheme::HammingSecded),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Bits packed LSB-first: bit `i` lives in byte `i / 8` at position `i % 8`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedBits {
    bytes: Vec<u8>,
    len: usize,
}

impl PackedBits {
    pub fn with_len(len: usize) -> Self {
        PackedBits {
            bytes: vec![0; len.div_ceil(8)],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len);
        if v {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn toggle(&mut self, i: usize) {
        let v = self.get(i);
        self.set(i, !v);
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignSidecar {
    pub scheme: Scheme,
    pub registry_digest: [u8; 32],
    pub payload: PackedBits,
}

impl SignSidecar {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(47 + self.payload.bytes.len());
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.push(self.scheme.code());
        out.extend_from_slice(&self.registry_digest);
        out.extend_from_slice(&(self.payload.len as u64).to_le_bytes());
        out.extend_from_slice(&self.payload.bytes);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 47 || &b[..4] != SIDECAR_MAGIC {
            return Err(Error::Sidecar("missing NLSB header".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != SIDECAR_VERSION {
            return Err(Error::Sidecar(format!("unsupported version {version}")));
        }
        let scheme = Scheme::from_code(b[6])?;
        let registry_digest: [u8; 32] = b[7..39].try_into().unwrap();
        let len = u64::from_le_bytes(b[39..47].try_into().unwrap()) as usize;
        let payload = &b[47..];
        if payload.len() != len.div_ceil(8) {
            return Err(Error::Sidecar(format!(
                "payload of {} bytes does not hold {len} bits",
                payload.len()
            )));
        }
        Ok(SignSidecar {
            scheme,
            registry_digest,
            payload: PackedBits {
                bytes: payload.to_vec(),
                len,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn current_signs(a: &WeightArchive, r: &ProtectionRegistry) -> Result<Vec<bool>> {
    r.protected
        .iter()
        .map(|c| a.word(&c.tensor, c.flat_index).map(|w| w.sign() == 1))
        .collect()
}

/// Number of SEC-DED codewords covering `n` protected signs.
pub fn hamming_blocks(n: usize) -> usize {
    n.div_ceil(hamming::DATA_BITS)
}

/// Registry positions held by codeword `b`, in data-bit order. Positions
/// are interleaved (`i mod blocks`), so signs adjacent in rank order sit in
/// different codewords.
pub fn hamming_block(n: usize, b: usize) -> impl Iterator<Item = usize> {
    (b..n).step_by(hamming_blocks(n).max(1))
}

pub fn encode(a: &WeightArchive, r: &ProtectionRegistry, scheme: Scheme) -> Result<SignSidecar> {
    let signs = current_signs(a, r)?;
    let mut payload = PackedBits::with_len(scheme.payload_bits(signs.len()));
    match scheme {
        Scheme::Replicate3 => {
            for (i, &s) in signs.iter().enumerate() {
                for copy in 0..3 {
                    payload.set(3 * i + copy, s);
                }
            }
        }
        Scheme::HammingSecded => {
            for b in 0..hamming_blocks(signs.len()) {
                let block: Vec<bool> = hamming_block(signs.len(), b).map(|i| signs[i]).collect();
                for (j, &c) in hamming::encode(&block).iter().enumerate() {
                    payload.set(b * hamming::CHECK_BITS + j, c);
                }
            }
        }
    }
    Ok(SignSidecar {
        scheme,
        registry_digest: r.digest(),
        payload,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    pub repaired: WeightArchive,
    /// Protected parameters whose sign bit was restored, in registry order.
    pub corrected: Vec<ParamCoord>,
    /// Hamming blocks with a detected but uncorrectable error.
    pub alarms: Vec<usize>,
}

pub fn verify_and_repair(a: &WeightArchive, r: &ProtectionRegistry, s: &SignSidecar) -> Result<RepairOutcome> {
    if s.registry_digest != r.digest() {
        return Err(Error::Sidecar("sidecar was produced for a different registry".into()));
    }
    if s.payload.len() != s.scheme.payload_bits(r.len()) {
        return Err(Error::Sidecar(format!(
            "payload holds {} bits, registry needs {}",
            s.payload.len(),
            s.scheme.payload_bits(r.len())
        )));
    }
    let signs = current_signs(a, r)?;
    let mut wrong: Vec<usize> = Vec::new();
    let mut alarms = Vec::new();
    match s.scheme {
        Scheme::Replicate3 => {
            for (i, &sign) in signs.iter().enumerate() {
                let votes = (0..3).filter(|&c| s.payload.get(3 * i + c)).count();
                if (votes >= 2) != sign {
                    wrong.push(i);
                }
            }
        }
        Scheme::HammingSecded => {
            for b in 0..hamming_blocks(signs.len()) {
                let members: Vec<usize> = hamming_block(signs.len(), b).collect();
                let block: Vec<bool> = members.iter().map(|&i| signs[i]).collect();
                let mut check = [false; hamming::CHECK_BITS];
                for (j, c) in check.iter_mut().enumerate() {
                    *c = s.payload.get(b * hamming::CHECK_BITS + j);
                }
                match hamming::decode(&block, &check) {
                    hamming::Decoded::DataError(i) => wrong.push(members[i]),
                    hamming::Decoded::Uncorrectable => alarms.push(b),
                    hamming::Decoded::Clean | hamming::Decoded::CheckError => {}
                }
            }
        }
    }
    let mut repaired = a.clone();
    let mut corrected = Vec::with_capacity(wrong.len());
    for i in wrong {
        let c = &r.protected[i];
        let w = repaired.word(&c.tensor, c.flat_index)?;
        repaired.set_word(&c.tensor, c.flat_index, FloatWord(w.0 ^ (1 << SIGN_BIT)))?;
        corrected.push(c.clone());
    }
    Ok(RepairOutcome {
        repaired,
        corrected,
        alarms,
    })
}

/// Random sign-flip barrage, optional repair, then accuracy.
pub fn stress(
    model: &Model,
    data: &Dataset,
    protection: Option<(&ProtectionRegistry, &SignSidecar)>,
    n_flips: usize,
    seed: u64,
) -> Result<EvalReport> {
    let baseline = accuracy(model, data)?;
    stress_against(model, data, baseline, protection, n_flips, seed, true)
}

/// [`stress`] with a precomputed baseline accuracy. With `sign_only` unset
/// the barrage hits uniformly random bit positions.
pub fn stress_against(
    model: &Model,
    data: &Dataset,
    baseline: f64,
    protection: Option<(&ProtectionRegistry, &SignSidecar)>,
    n_flips: usize,
    seed: u64,
    sign_only: bool,
) -> Result<EvalReport> {
    let mut report = EvalReport::new("stress", model.manifest.param_layer_count(), baseline, vec![seed]);
    if n_flips == 0 {
        report.push(0, baseline)?;
        return Ok(report);
    }
    let plan = plan_random(&model.manifest, &model.params, n_flips, seed, sign_only, None)?;
    let mut attacked = model.params.clone();
    apply_in_place(&plan, &mut attacked)?;
    if let Some((r, s)) = protection {
        attacked = verify_and_repair(&attacked, r, s)?.repaired;
    }
    let acc = accuracy(&model.with_params(attacked)?, data)?;
    debug_assert!((ar(baseline, acc)? - (baseline - acc) / baseline).abs() < 1e-12);
    report.push(n_flips, acc)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::score_magnitude;
    use crate::tensorstore::{candidate_params, write_archive, KernelId, LayerSpec, ModelManifest};
    use crate::tensorstore::Candidate;
    use proptest::prelude::*;

    fn scored(vals: &[f32]) -> ScoreTable {
        let c: Vec<Candidate> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| Candidate {
                coord: ParamCoord::new("w", i),
                kernel: KernelId { param_layer_index: 1, kernel_index: i },
                value: v,
            })
            .collect();
        score_magnitude(&c)
    }

    fn archive(vals: &[f32]) -> WeightArchive {
        let mut a = WeightArchive::new();
        a.push_tensor("w", &[vals.len()], vals).unwrap();
        a
    }

    fn flip_sign_at(a: &mut WeightArchive, i: usize) {
        let w = a.word("w", i).unwrap();
        a.set_word("w", i, FloatWord(w.0 ^ 0x8000_0000)).unwrap();
    }

    #[test]
    fn selection_examples() {
        let t = scored(&[5.0, 3.0, 1.0]);
        let r = select_protected(&t, 1.0 / 3.0).unwrap();
        assert_eq!(r.protected, vec![ParamCoord::new("w", 0)]);
        assert_eq!(select_protected(&t, 1.0).unwrap().len(), 3);
        assert!(select_protected(&t, 0.0).is_err());
        assert!(select_protected(&t, 1.5).is_err());
        assert_eq!(FRACTION_GRID, [0.01, 0.05, 0.10, 0.20]);
        assert_eq!(protected_count(0.01, 51_912).unwrap(), 520);
        assert_eq!(protected_count(0.2, 10).unwrap(), 2);
    }

    #[test]
    fn random_selection() {
        let pop: Vec<ParamCoord> = (0..20).map(|i| ParamCoord::new("w", i)).collect();
        let all = select_protected_random(&pop, 1.0, 3).unwrap();
        let mut got = all.protected.clone();
        got.sort();
        assert_eq!(got, pop);
        assert_eq!(select_protected_random(&pop, 0.25, 8).unwrap(), select_protected_random(&pop, 0.25, 8).unwrap());
        assert_eq!(select_protected_random(&pop, 0.25, 8).unwrap().len(), 5);
    }

    #[test]
    fn replicate3_encoding() {
        let a = archive(&[1.0, -1.0, -2.0]);
        let r = select_protected(&scored(&[3.0, 2.0, 1.0]), 1.0).unwrap();
        let s = encode(&a, &r, Scheme::Replicate3).unwrap();
        let bits: Vec<bool> = (0..9).map(|i| s.payload.get(i)).collect();
        assert_eq!(bits, vec![false, false, false, true, true, true, true, true, true]);
        let empty = ProtectionRegistry { selection: Selection::ByScore, fraction: 1.0, seed: None, protected: vec![] };
        assert!(encode(&a, &empty, Scheme::Replicate3).unwrap().payload.is_empty());
        assert!(encode(&a, &empty, Scheme::HammingSecded).unwrap().payload.is_empty());
    }

    #[test]
    fn hamming_blocks_interleave_and_cover() {
        for n in [1usize, 56, 57, 58, 200, 2596] {
            let nb = hamming_blocks(n);
            let mut seen = vec![0; n];
            for b in 0..nb {
                let members: Vec<usize> = hamming_block(n, b).collect();
                assert!(!members.is_empty() && members.len() <= hamming::DATA_BITS);
                for i in members {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
            if nb > 1 {
                assert_ne!(hamming_block(n, 0).nth(0), hamming_block(n, 1).nth(0));
            }
        }
    }

    #[test]
    fn hamming_zero_block_has_zero_checks() {
        let a = archive(&[1.0; 10]);
        let r = select_protected(&scored(&[1.0; 10]), 1.0).unwrap();
        let s = encode(&a, &r, Scheme::HammingSecded).unwrap();
        assert_eq!(s.payload.len(), 7);
        assert!((0..7).all(|i| !s.payload.get(i)));
    }

    #[test]
    fn repair_examples() {
        let vals = [1.0, -2.0, 3.0, -4.0];
        let a = archive(&vals);
        let r = select_protected(&scored(&vals), 1.0).unwrap();
        for scheme in [Scheme::Replicate3, Scheme::HammingSecded] {
            let s = encode(&a, &r, scheme).unwrap();
            let mut hit = a.clone();
            flip_sign_at(&mut hit, 2);
            let out = verify_and_repair(&hit, &r, &s).unwrap();
            assert_eq!(write_archive(&out.repaired), write_archive(&a));
            assert_eq!(out.corrected, vec![ParamCoord::new("w", 2)]);
            assert!(out.alarms.is_empty());
        }
        let mut s = encode(&a, &r, Scheme::Replicate3).unwrap();
        s.payload.toggle(4);
        let out = verify_and_repair(&a, &r, &s).unwrap();
        assert_eq!(out.repaired, a);
        assert!(out.corrected.is_empty());

        let s = encode(&a, &r, Scheme::HammingSecded).unwrap();
        let mut hit = a.clone();
        flip_sign_at(&mut hit, 0);
        flip_sign_at(&mut hit, 3);
        let out = verify_and_repair(&hit, &r, &s).unwrap();
        assert_eq!(out.alarms, vec![0]);
        assert_eq!(out.repaired, hit);
    }

    #[test]
    fn mismatched_sidecar_is_rejected() {
        let vals = [1.0, -2.0, 3.0];
        let a = archive(&vals);
        let r = select_protected(&scored(&vals), 1.0).unwrap();
        let other = select_protected(&scored(&vals), 0.5).unwrap();
        let s = encode(&a, &r, Scheme::Replicate3).unwrap();
        assert!(matches!(verify_and_repair(&a, &other, &s), Err(Error::Sidecar(_))));
    }

    #[test]
    fn sidecar_file_layout() {
        let vals = [1.0, -2.0, 3.0];
        let a = archive(&vals);
        let r = select_protected(&scored(&vals), 1.0).unwrap();
        let s = encode(&a, &r, Scheme::Replicate3).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"NLSB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(&bytes[7..39], &Sha256::digest(r.to_json().as_bytes())[..]);
        assert_eq!(u64::from_le_bytes(bytes[39..47].try_into().unwrap()), 9);
        assert_eq!(bytes.len(), 47 + 2);
        assert_eq!(SignSidecar::from_bytes(&bytes).unwrap(), s);
        assert!(SignSidecar::from_bytes(&bytes[..46]).is_err());
        let r2 = ProtectionRegistry::from_json(&r.to_json()).unwrap();
        assert_eq!(r2.digest(), r.digest());
    }

    fn tiny_model() -> (Model, Dataset) {
        let mut a = WeightArchive::new();
        a.push_tensor("fc.weight", &[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut fc = LayerSpec::linear("fc");
        fc.bias_tensor = None;
        let m = ModelManifest { input_shape: vec![2], class_count: 2, layers: vec![fc] };
        let data = Dataset::new(vec![2], vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]).unwrap();
        (Model::new(m, a).unwrap(), data)
    }

    #[test]
    fn stress_examples() {
        let (model, data) = tiny_model();
        let r0 = stress(&model, &data, None, 0, 1).unwrap();
        assert_eq!(r0.per_k[0].ar, 0.0);
        let cands = candidate_params(&model.manifest, &model.params, 10).unwrap();
        let reg = select_protected(&score_magnitude(&cands), 1.0).unwrap();
        let side = encode(&model.params, &reg, Scheme::Replicate3).unwrap();
        for seed in 0..5 {
            let rep = stress(&model, &data, Some((&reg, &side)), 4, seed).unwrap();
            assert_eq!(rep.per_k[0].ar, 0.0);
        }
        let unprotected = stress(&model, &data, None, 4, 0).unwrap();
        assert_eq!(unprotected.per_k[0].ar, 1.0);
    }

    proptest! {
        #[test]
        fn repair_is_sound_and_idempotent(
            vals in prop::collection::vec(-4.0f32..4.0, 1..150),
            frac in 0.05f32..=1.0,
            flips in prop::collection::vec(any::<u16>(), 0..12),
            replica_hits in prop::collection::vec((any::<u16>(), 0usize..3), 0..6),
        ) {
            let a = archive(&vals);
            let r = select_protected(&scored(&vals), frac).unwrap();
            let index_of = |c: &ParamCoord| c.flat_index;

            // replicate3: any protected sign flips, at most one bad replica per bit
            let s = encode(&a, &r, Scheme::Replicate3).unwrap();
            let mut hit = a.clone();
            let mut flipped = std::collections::HashSet::new();
            for f in &flips {
                let i = *f as usize % r.len();
                if flipped.insert(i) {
                    flip_sign_at(&mut hit, index_of(&r.protected[i]));
                }
            }
            let mut s_bad = s.clone();
            let mut bad_bits = std::collections::HashSet::new();
            for (b, copy) in &replica_hits {
                let i = *b as usize % r.len();
                if bad_bits.insert(i) {
                    s_bad.payload.toggle(3 * i + copy);
                }
            }
            let out = verify_and_repair(&hit, &r, &s_bad).unwrap();
            prop_assert_eq!(write_archive(&out.repaired), write_archive(&a));
            let again = verify_and_repair(&out.repaired, &r, &s_bad).unwrap();
            prop_assert_eq!(&again.repaired, &out.repaired);
            prop_assert!(again.corrected.is_empty());

            // hamming: at most one flip per block
            let s = encode(&a, &r, Scheme::HammingSecded).unwrap();
            let mut hit = a.clone();
            let mut blocks = std::collections::HashSet::new();
            for f in &flips {
                let i = *f as usize % r.len();
                if blocks.insert(i % hamming_blocks(r.len())) {
                    flip_sign_at(&mut hit, index_of(&r.protected[i]));
                }
            }
            let out = verify_and_repair(&hit, &r, &s).unwrap();
            prop_assert!(out.alarms.is_empty());
            prop_assert_eq!(write_archive(&out.repaired), write_archive(&a));
            let again = verify_and_repair(&out.repaired, &r, &s).unwrap();
            prop_assert_eq!(again.repaired, out.repaired);
        }
    }
}
