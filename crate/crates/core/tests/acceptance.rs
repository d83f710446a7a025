//! Acceptance suite: one PASS/FAIL line per criterion on the pinned desk
//! model and fixtures. Exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::test_runner::{Config as PropConfig, TestRunner};
use signlesion::bench::{
    self, brute_force_single_flip, competition_rank, defense_sweep, evaluate_plan, mar, percentile, protection_registry,
    random_baseline, Desk, DeskConfig,
};
use signlesion::bitkit::{flip_bit, flip_sign, FloatWord, SIGN_BIT};
use signlesion::lesion::{plan_1p_dnl, plan_dnl, plan_magnitude_unconstrained, select_top_k, FlipPlan};
use signlesion::nnengine::{grad_sum_logits, Dataset, Model};
use signlesion::scoring::{score_hybrid, score_magnitude};
use signlesion::shield::{encode, hamming_block, hamming_blocks, verify_and_repair, ProtectionRegistry, Scheme, Selection, SignSidecar};
use signlesion::tensorstore::{candidate_params, read_archive, write_archive, LayerSpec, ModelManifest, WeightArchive};

const MIN_DESK_ACC: f64 = 0.90;
const BITS_BUDGET: Duration = Duration::from_secs(10);
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const GRAD_MIN_COORDS: usize = 100;
const GRAD_REL_TOL: f64 = 1e-3;
const SCORE_BUDGET: Duration = Duration::from_secs(5);
const POTENCY_BUDGET: Duration = Duration::from_secs(600);
const POTENCY_PERCENTILE: f64 = 0.95;
const ORACLE_BUDGET: Duration = Duration::from_secs(600);
const ORACLE_TOP_SHARE: f64 = 0.05;
const DEFENSE_BUDGET: Duration = Duration::from_secs(900);
const DEFENSE_MIN_SEEDS: usize = 20;
const SOUNDNESS_FRACTION: f32 = 0.05;
const SOUNDNESS_CASES: u32 = 64;
const LATE_LAYER_SCALE: f32 = 100.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Ctx {
    cfg: DeskConfig,
    desk: Desk,
}

fn c1_bit_exactness(ctx: &Ctx) -> Outcome {
    let mut bad = Vec::new();
    let bytes = write_archive(&ctx.desk.model.params);
    let back = read_archive(&bytes).expect("own archive parses");
    if write_archive(&back) != bytes {
        bad.push("desk archive round trip".to_string());
    }
    let header = br#"{"b" : {"shape":[2],"dtype":"F32","data_offsets":[8,16]},"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
    let mut foreign = (header.len() as u64).to_le_bytes().to_vec();
    foreign.extend_from_slice(header);
    for v in [1.5f32, -0.0, f32::from_bits(0x7fc0_0123), -2.0] {
        foreign.extend_from_slice(&v.to_le_bytes());
    }
    match read_archive(&foreign) {
        Ok(a) if write_archive(&a) == foreign => {}
        _ => bad.push("foreign-layout round trip".into()),
    }
    let mut flipped = back.clone();
    let name = flipped.names().next().unwrap().to_string();
    for _ in 0..2 {
        let w = flipped.word(&name, 0).unwrap();
        flipped.set_word(&name, 0, flip_bit(w, SIGN_BIT).unwrap()).unwrap();
    }
    if write_archive(&flipped) != bytes {
        bad.push("archive flip involution".into());
    }

    let specials = [
        0x0000_0000u32,
        0x8000_0000,
        0x3f80_0000,
        0xbf80_0000,
        0x7f80_0000,
        0xff80_0000,
        0x7fc0_0000,
        0x7f80_0001,
        0xffbf_ffff,
        0x7fa5_5a5a,
        0x0000_0001,
        0x807f_ffff,
        0x7f7f_ffff,
    ];
    let weyl = (0..1_000_000u32).map(|i| i.wrapping_mul(0x9e37_79b9) ^ (i >> 3));
    let mut words = 0u64;
    for bits in specials.iter().copied().chain(weyl) {
        let w = FloatWord(bits);
        for pos in 0..32 {
            let once = flip_bit(w, pos).unwrap();
            if once.0 != bits ^ (1 << pos) || flip_bit(once, pos).unwrap() != w {
                bad.push(format!("flip involution {bits:#010x} bit {pos}"));
            }
        }
        let s = flip_sign(f32::from_bits(bits)).to_bits();
        if s & 0x7fff_ffff != bits & 0x7fff_ffff || s >> 31 == bits >> 31 {
            bad.push(format!("sign flip magnitude {bits:#010x}"));
        }
        words += 1;
    }
    if flip_sign(-0.0).to_bits() != 0 || flip_sign(0.0).to_bits() != 0x8000_0000 {
        bad.push("signed zero".into());
    }
    if flip_sign(f32::from_bits(0x7f80_0001)).to_bits() != 0xff80_0001 {
        bad.push("NaN payload".into());
    }
    bad.truncate(5);
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("archives byte-identical; {words} words × 32 positions involutive")
        } else {
            bad.join("; ")
        },
    )
}

fn c2_gradients(ctx: &Ctx) -> Outcome {
    let s = common::fd_check(&ctx.desk.model, ctx.cfg.attack.gauss_seed, 20, GRAD_REL_TOL);
    let pass = s.failures.is_empty() && s.checked >= GRAD_MIN_COORDS;
    let mut detail = format!(
        "{} coordinates checked ({} skipped at activation kinks), worst rel err {:.2e} < {GRAD_REL_TOL:e}",
        s.checked, s.skipped, s.worst_rel
    );
    if let Some(f) = s.failures.first() {
        detail = format!("{} failures, first: {f}", s.failures.len());
    }
    outcome(pass, detail)
}

fn c3_score_equivalence(ctx: &Ctx) -> Outcome {
    let m = &ctx.desk.model;
    let cands = candidate_params(&m.manifest, &m.params, usize::MAX).unwrap();
    let g = grad_sum_logits(m, ctx.cfg.attack.gauss_seed);
    let hybrid = score_hybrid(&cands, &g, 1.0, 0.0).unwrap();
    let magnitude = score_magnitude(&cands);
    let order = |t: &signlesion::scoring::ScoreTable| {
        t.ranked()
            .into_iter()
            .map(|e| e.candidate.coord.clone())
            .collect::<Vec<_>>()
    };
    let (h, mg) = (order(&hybrid), order(&magnitude));
    let first_diff = h.iter().zip(&mg).position(|(a, b)| a != b);
    outcome(
        h.len() == mg.len() && first_diff.is_none(),
        match first_diff {
            None => format!("{} candidates in identical order", h.len()),
            Some(i) => format!("orders diverge at rank {}", i + 1),
        },
    )
}

fn c4_pass_counts(ctx: &Ctx) -> Outcome {
    let m = ctx.desk.model.clone();
    let a = &ctx.cfg.attack;
    let before = m.counters();
    let dnl = plan_dnl(&m.manifest, &m.params, a.n, a.layers).unwrap();
    let after_dnl = m.counters().since(before);
    let one = plan_1p_dnl(&m, a.n, a.layers, a.gauss_seed, a.alpha, a.beta).unwrap();
    let after_1p = m.counters().since(before).since(after_dnl);
    let pass = (after_dnl.forward, after_dnl.backward) == (0, 0)
        && (after_1p.forward, after_1p.backward) == (1, 1)
        && dnl.k == a.n
        && one.k == a.n;
    outcome(
        pass,
        format!(
            "dnl: {}F/{}B, 1p_dnl: {}F/{}B",
            after_dnl.forward, after_dnl.backward, after_1p.forward, after_1p.backward
        ),
    )
}

fn c5_potency(ctx: &Ctx) -> Outcome {
    let (m, test, a) = (&ctx.desk.model, &ctx.desk.test, &ctx.cfg.attack);
    let plan = plan_dnl(&m.manifest, &m.params, a.n, a.layers).unwrap();
    let dnl = evaluate_plan(m, test, &plan, None).unwrap();
    let seeds = ctx.cfg.random_baseline.seeds();
    let random = random_baseline(m, test, a.n, None, &seeds).unwrap();
    let ar_n = dnl.ar_at(a.n).unwrap();
    let p95_ar = random.per_k[a.n - 1].spread.unwrap().p95;
    let mut seed_mars: Vec<f64> = random.per_seed_mar().into_iter().map(|(_, v)| v).collect();
    seed_mars.sort_by(f64::total_cmp);
    let p95_mar = percentile(&seed_mars, POTENCY_PERCENTILE);
    let dnl_mar = dnl.mar.unwrap();
    outcome(
        ar_n > p95_ar && dnl_mar > p95_mar && seed_mars.len() == seeds.len(),
        format!(
            "AR({n}) {ar_n:.4} vs random p95 {p95_ar:.4}; mAR({n}) {dnl_mar:.4} vs random p95 {p95_mar:.4} over {} runs",
            seeds.len(),
            n = a.n
        ),
    )
}

fn c6_oracle(ctx: &Ctx) -> Outcome {
    let (m, a) = (&ctx.desk.model, &ctx.cfg.attack);
    let sub = ctx.desk.oracle_set(&ctx.cfg);
    let table = brute_force_single_flip(m, &sub, a.layers).unwrap();
    let plan = plan_dnl(&m.manifest, &m.params, 1, a.layers).unwrap();
    let rank = competition_rank(&table, &plan.flips[0].coord).unwrap();
    let limit = ORACLE_TOP_SHARE * table.len() as f64;
    outcome(
        (rank as f64) <= limit,
        format!(
            "DNL k=1 pick {}[{}] has rank {rank} of {} (top-5% limit {limit:.0}); best AR(1) {:.4}, pick AR(1) {:.4}",
            plan.flips[0].coord.tensor,
            plan.flips[0].coord.flat_index,
            table.len(),
            table[0].ar,
            table[rank - 1].ar
        ),
    )
}

/// Two large weights share a linear row; the constrained plan spreads its
/// two flips over both rows.
fn same_kernel_fixture() -> (Model, Dataset) {
    let mut m = ModelManifest {
        input_shape: vec![2],
        class_count: 2,
        layers: vec![LayerSpec::linear("fc1"), LayerSpec::relu("r"), LayerSpec::linear("fc2")],
    };
    m.assign_param_indices().unwrap();
    let mut a = WeightArchive::new();
    a.push_tensor("fc1.weight", &[2, 2], &[4.0, 4.0, 0.0, 3.0]).unwrap();
    a.push_tensor("fc1.bias", &[2], &[0.0; 2]).unwrap();
    a.push_tensor("fc2.weight", &[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    a.push_tensor("fc2.bias", &[2], &[0.0; 2]).unwrap();
    let data = Dataset::new(vec![2], vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0], vec![0, 1, 0]).unwrap();
    (Model::new(m, a).unwrap(), data)
}

fn ar_at(model: &Model, data: &Dataset, plan: &FlipPlan, k: usize) -> f64 {
    evaluate_plan(model, data, plan, None).unwrap().ar_at(k).unwrap()
}

fn c7_constraints(ctx: &Ctx) -> Outcome {
    let (fx, data) = same_kernel_fixture();
    let table = score_magnitude(&candidate_params(&fx.manifest, &fx.params, usize::MAX).unwrap());
    let unconstrained = select_top_k(&table, 2, false).unwrap();
    let plan_u = plan_magnitude_unconstrained(&fx.manifest, &fx.params, 2, usize::MAX).unwrap();
    let plan_c = plan_dnl(&fx.manifest, &fx.params, 2, usize::MAX).unwrap();
    let same_kernel = unconstrained[0].tensor == unconstrained[1].tensor
        && unconstrained[0].flat_index / 2 == unconstrained[1].flat_index / 2;
    let (ar_c, ar_u) = (ar_at(&fx, &data, &plan_c, 2), ar_at(&fx, &data, &plan_u, 2));

    let m = &ctx.desk.model;
    let mut late = m.params.clone();
    for t in ["fc2.weight", "fc2.bias"] {
        let v: Vec<f32> = late.values(t).unwrap().iter().map(|x| x * LATE_LAYER_SCALE).collect();
        late.set_values(t, &v).unwrap();
    }
    let late = m.with_params(late).unwrap();
    let test = &ctx.desk.test;
    let first2 = plan_dnl(&late.manifest, &late.params, 5, 2).unwrap();
    let global = plan_magnitude_unconstrained(&late.manifest, &late.params, 5, usize::MAX).unwrap();
    let (ar_l, ar_g) = (ar_at(&late, test, &first2, 5), ar_at(&late, test, &global, 5));
    outcome(
        same_kernel && ar_c >= ar_u && ar_l > ar_g,
        format!(
            "same-kernel fixture AR(2) one-per-kernel {ar_c:.4} ≥ unconstrained {ar_u:.4}; \
             late-layer fixture AR(5) first-2 DNL {ar_l:.4} > global magnitude {ar_g:.4}"
        ),
    )
}

struct Protected {
    registry: ProtectionRegistry,
    sidecar: SignSidecar,
}

fn toggle_sign(a: &mut WeightArchive, c: &signlesion::tensorstore::ParamCoord) {
    let w = a.word(&c.tensor, c.flat_index).unwrap();
    a.set_word(&c.tensor, c.flat_index, FloatWord(w.0 ^ (1 << SIGN_BIT))).unwrap();
}

/// Repairs `attacked` and checks the result equals `expected` and that a
/// second repair changes nothing.
fn repair_ok(p: &Protected, attacked: &WeightArchive, sidecar: &SignSidecar, expected: &[u8]) -> bool {
    let Ok(once) = verify_and_repair(attacked, &p.registry, sidecar) else {
        return false;
    };
    let Ok(twice) = verify_and_repair(&once.repaired, &p.registry, sidecar) else {
        return false;
    };
    once.alarms.is_empty()
        && write_archive(&once.repaired) == expected
        && twice.corrected.is_empty()
        && write_archive(&twice.repaired) == expected
}

/// Random corruption within the scheme's correction bound: at most one
/// sidecar copy per parameter (replicate3), at most one of the 64 bits of
/// each codeword (hamming), plus arbitrary unprotected sign flips.
fn bounded_corruption(
    p: &Protected,
    original: &WeightArchive,
    unprotected: &[signlesion::tensorstore::ParamCoord],
    seed: u64,
) -> (WeightArchive, SignSidecar, Vec<u8>) {
    let mut rng = common::XorShift(seed | 1);
    let mut attacked = original.clone();
    let mut sidecar = p.sidecar.clone();
    let n = p.registry.len();
    match p.sidecar.scheme {
        Scheme::Replicate3 => {
            for i in 0..n {
                match rng.below(8) {
                    0 => toggle_sign(&mut attacked, &p.registry.protected[i]),
                    1 => {
                        toggle_sign(&mut attacked, &p.registry.protected[i]);
                        sidecar.payload.toggle(3 * i + rng.below(3));
                    }
                    2 => sidecar.payload.toggle(3 * i + rng.below(3)),
                    _ => {}
                }
            }
        }
        Scheme::HammingSecded => {
            for b in 0..hamming_blocks(n) {
                if rng.below(2) == 0 {
                    continue;
                }
                let members: Vec<usize> = hamming_block(n, b).collect();
                let pos = rng.below(members.len() + 7);
                if pos < members.len() {
                    toggle_sign(&mut attacked, &p.registry.protected[members[pos]]);
                } else {
                    sidecar.payload.toggle(7 * b + pos - members.len());
                }
            }
        }
    }
    let mut expected = original.clone();
    for _ in 0..rng.below(50) {
        let c = &unprotected[rng.below(unprotected.len())];
        toggle_sign(&mut attacked, c);
        toggle_sign(&mut expected, c);
    }
    (attacked, sidecar, write_archive(&expected))
}

fn c8_soundness(ctx: &Ctx) -> Outcome {
    let m = &ctx.desk.model;
    let original = write_archive(&m.params);
    let mut notes = Vec::new();
    let mut pass = true;
    for scheme in [Scheme::Replicate3, Scheme::HammingSecded] {
        let registry = protection_registry(m, SOUNDNESS_FRACTION, Selection::ByScore, 0).unwrap();
        let sidecar = encode(&m.params, &registry, scheme).unwrap();
        let p = Protected { registry, sidecar };
        let mut singles = 0;
        let mut failures = 0;
        for c in &p.registry.protected {
            let mut a = m.params.clone();
            toggle_sign(&mut a, c);
            failures += usize::from(!repair_ok(&p, &a, &p.sidecar, &original));
            singles += 1;
        }
        for bit in 0..p.sidecar.payload.len() {
            let mut s = p.sidecar.clone();
            s.payload.toggle(bit);
            failures += usize::from(!repair_ok(&p, &m.params, &s, &original));
            singles += 1;
        }
        let protected: std::collections::HashSet<_> = p.registry.protected.iter().collect();
        let unprotected: Vec<_> = candidate_params(&m.manifest, &m.params, usize::MAX)
            .unwrap()
            .into_iter()
            .map(|c| c.coord)
            .filter(|c| !protected.contains(c))
            .collect();
        let mut runner = TestRunner::new(PropConfig {
            cases: SOUNDNESS_CASES,
            failure_persistence: None,
            ..PropConfig::default()
        });
        let prop = runner.run(&proptest::num::u64::ANY, |seed| {
            let (a, s, expected) = bounded_corruption(&p, &m.params, &unprotected, seed);
            proptest::prop_assert!(repair_ok(&p, &a, &s, &expected), "seed {}", seed);
            Ok(())
        });
        pass &= failures == 0 && prop.is_ok();
        notes.push(format!(
            "{scheme:?}: {singles} single corruptions ({failures} failed), {SOUNDNESS_CASES} bounded flip sets {}",
            if prop.is_ok() { "repaired" } else { "FAILED" }
        ));
    }
    outcome(pass, notes.join("; "))
}

fn c9_efficacy(ctx: &Ctx) -> Outcome {
    let (m, test, d) = (&ctx.desk.model, &ctx.desk.test, &ctx.cfg.defense);
    let scheme = d.scheme().unwrap();
    let seeds = d.seeds();
    let by_score = defense_sweep(
        m,
        test,
        scheme,
        Selection::ByScore,
        &d.fractions,
        d.selection_seed,
        d.stress_flip_fraction,
        &seeds,
    )
    .unwrap();
    let top = *d.fractions.last().unwrap();
    let random = defense_sweep(
        m,
        test,
        scheme,
        Selection::Random,
        &[top],
        d.selection_seed,
        d.stress_flip_fraction,
        &seeds,
    )
    .unwrap();
    let means: Vec<f64> = by_score.iter().map(|p| p.mean_ar).collect();
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    let (score_top, random_top) = (means[means.len() - 1], random[1].mean_ar);
    let curve: Vec<String> = by_score
        .iter()
        .map(|p| format!("{}%:{:.4}", p.fraction * 100.0, p.mean_ar))
        .collect();
    outcome(
        seeds.len() >= DEFENSE_MIN_SEEDS && monotone && score_top < random_top,
        format!(
            "{} seeds, mean AR by fraction [{}]; at {}% by-score {score_top:.4} < random {random_top:.4}",
            seeds.len(),
            curve.join(" "),
            top * 100.0
        ),
    )
}

fn c10_metrics(_: &Ctx) -> Outcome {
    let mut bad = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if got != want {
            bad.push(format!("{name}: {got} != {want}"));
        }
    };
    check("ar(0.80, 0.20)", bench::ar(0.80, 0.20).unwrap(), 0.75);
    check("ar(0.5, 0.25)", bench::ar(0.5, 0.25).unwrap(), 0.5);
    for x in [0.1, 0.37, 0.994, 1.0] {
        check("ar(x, x)", bench::ar(x, x).unwrap(), 0.0);
    }
    check("mar([0.5, 1.0])", mar(&[0.5, 1.0]).unwrap(), 0.75);
    for a in [0.1, 1.0 / 3.0, 0.65235, 0.9999] {
        for n in [1, 3, 7, 10] {
            check("mar(N × a)", mar(&vec![a; n]).unwrap(), a);
        }
    }
    check("mar(zeros)", mar(&[0.0; 10]).unwrap(), 0.0);
    let errors = bench::ar(0.0, 0.1).is_err() && mar(&[]).is_err();
    let pass = bad.is_empty() && errors;
    outcome(
        pass,
        if pass {
            "ar and mar match hand-computed values bit for bit; degenerate inputs rejected".into()
        } else {
            bad.join("; ")
        },
    )
}

type Criterion = (&'static str, fn(&Ctx) -> Outcome, Option<Duration>);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("bit-exactness", c1_bit_exactness, Some(BITS_BUDGET)),
        ("gradient oracle", c2_gradients, Some(GRAD_BUDGET)),
        ("score equivalence", c3_score_equivalence, Some(SCORE_BUDGET)),
        ("pass-count contract", c4_pass_counts, None),
        ("attack potency", c5_potency, Some(POTENCY_BUDGET)),
        ("oracle proximity", c6_oracle, Some(ORACLE_BUDGET)),
        ("constraint value", c7_constraints, None),
        ("defense soundness", c8_soundness, None),
        ("defense efficacy", c9_efficacy, Some(DEFENSE_BUDGET)),
        ("metric arithmetic", c10_metrics, None),
    ];
    let t = Instant::now();
    let cfg = DeskConfig::pinned();
    let desk = match Desk::build(&cfg) {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL setup: desk model training failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let acc = signlesion::nnengine::accuracy(&desk.model, &desk.test).unwrap();
    println!(
        "setup: desk CNN trained in {:.1?}, test accuracy {acc} (required ≥ {MIN_DESK_ACC})",
        t.elapsed()
    );
    if acc < MIN_DESK_ACC {
        println!("FAIL setup: desk model below the accuracy floor");
        return ExitCode::FAILURE;
    }
    let ctx = Ctx { cfg, desk };
    let mut passed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f(&ctx);
        let took = t.elapsed();
        let in_budget = budget.is_none_or(|b| took <= b);
        let ok = o.pass && in_budget;
        passed += usize::from(ok);
        let budget_note = match budget {
            Some(b) => format!("{took:.1?} of {b:?}"),
            None => format!("{took:.1?}"),
        };
        println!(
            "{} [{:>2}] {name}: {} ({budget_note})",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if passed == criteria.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
