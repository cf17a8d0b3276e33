//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p dramdecomp --test acceptance`; pass
//! criterion numbers as arguments to run a subset.

mod common;

use std::collections::HashMap;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use dramdecomp::gf2::BitMask;
use dramdecomp::mapping::{class_span_equal, suggest_missing, AddressingFunction, ComponentClass, DramAddressMapping};
use dramdecomp::pipeline::{
    classify_by_consecutive, decompose, estimate_refresh_function_count, group_by_refresh, validate_and_repair,
    PipelineConfig, TimingHints,
};
use dramdecomp::probe::{classify_refresh_interval, RefreshClass, RefreshReference, SimOracle};
use dramdecomp::reference::{by_name, ReferenceMapping, INTEL_BC_1CH_1DPC_RAW, REFERENCES};
use dramdecomp::sim::{NoiseModel, RefreshKind, RefreshMode, Simulator, TimingConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ComponentClass::*;

const SIGMA: f64 = 2.0;
const RUNS: u64 = 100;
const MIN_SUCCESSES: usize = 95;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Runs `f(seed)` for every seed on all cores and returns the results in
/// seed order.
fn par_seeds<T: Send>(seeds: std::ops::Range<u64>, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let seeds: Vec<u64> = seeds.collect();
    let chunk = seeds.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(|&seed| f(seed)).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    })
}

fn unlabeled(m: &DramAddressMapping) -> DramAddressMapping {
    m.with_functions(m.functions().iter().map(|f| AddressingFunction::new(f.mask, Unassigned)).collect())
        .unwrap()
}

fn exact_match(recovered: &DramAddressMapping, truth: &DramAddressMapping) -> bool {
    recovered.row_mask() == truth.row_mask()
        && recovered.col_mask() == truth.col_mask()
        && ComponentClass::FUNCTION_CLASSES
            .iter()
            .all(|&c| class_span_equal(recovered, truth, c))
}

fn criterion_1() -> Outcome {
    let mut worst = (usize::MAX, "");
    let mut slowest = Duration::ZERO;
    for r in REFERENCES {
        let truth = r.mapping();
        let runs = par_seeds(0..RUNS, |seed| {
            let start = Instant::now();
            let mut o = reference_oracle(&r, SIGMA, seed);
            let mut cfg = PipelineConfig::for_mapping(&truth);
            cfg.seed = seed;
            let ok = decompose(&mut o, &cfg).is_ok_and(|rec| exact_match(&rec.mapping, &truth));
            (ok, start.elapsed())
        });
        let good = runs.iter().filter(|x| x.0).count();
        slowest = slowest.max(runs.iter().map(|x| x.1).max().unwrap());
        if good < worst.0 {
            worst = (good, r.name);
        }
    }
    outcome(
        worst.0 >= MIN_SUCCESSES && slowest <= Duration::from_secs(60),
        format!(
            "worst config {} {}/{RUNS}, slowest run {:.2}s (need >= {MIN_SUCCESSES}, <= 60s)",
            worst.1,
            worst.0,
            slowest.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut deletions = 0;
    let all_injective = REFERENCES.iter().all(|r| r.mapping().is_injective());
    for r in REFERENCES {
        let m = r.mapping();
        for i in 0..m.functions().len() {
            deletions += 1;
            let mut f = m.functions().to_vec();
            let removed = f.remove(i);
            let broken = m.with_functions(f.clone()).unwrap();
            let bad: Vec<_> = broken.injectivity_check().into_iter().filter(|s| !s.injective).collect();
            let located = bad.len() == 1 && bad[0].bits.intersects(removed.mask);
            let suggested = bad.first().is_some_and(|b| suggest_missing(b).is_ok_and(|s| !s.is_empty()));
            let repaired = validate_and_repair(f, m.row_mask(), m.col_mask(), m.offset_bits(), m.addr_width())
                .is_ok_and(|(x, _)| x.is_injective());
            if broken.is_injective() || !located || !suggested || !repaired {
                failures.push(format!("{} without {}", r.name, removed.mask));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        all_injective && failures.is_empty() && secs <= 10.0,
        format!(
            "{deletions} deletions, {} failed{}, {secs:.2}s (need <= 10s)",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn criterion_3() -> Outcome {
    let m = by_name("intel-bc-1ch-1dpc").unwrap().mapping();
    let mode = RefreshMode::new(RefreshKind::FineGrained, vec![Channel]).unwrap();
    let sim = Simulator::new(m.clone(), TimingConfig::default(), mode, NoiseModel::gaussian(SIGMA, 3)).unwrap();
    assert_eq!(sim.refresh_group_count(), 2);
    let mut o = SimOracle::new(sim, 33);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut same, mut cross) = (0, 0);
    let (mut same_ok, mut cross_ok) = (0, 0);
    while same < 200 || cross < 200 {
        let a = rng.random::<u64>() & m.address_bits().0;
        let b = rng.random::<u64>() & m.address_bits().0;
        let split = o.sim().refresh_group(a) != o.sim().refresh_group(b);
        if (split && cross == 200) || (!split && same == 200) {
            continue;
        }
        let v = classify_refresh_interval(&mut o, a, b, RefreshReference::Unknown, 5000).map(|v| v.classification);
        if split {
            cross += 1;
            cross_ok += (v == Ok(RefreshClass::Reduced)) as usize;
        } else {
            same += 1;
            same_ok += (v == Ok(RefreshClass::Normal)) as usize;
        }
    }
    let acc = (same_ok + cross_ok) as f64 / 400.0;
    outcome(
        acc >= 0.99,
        format!("same-group {same_ok}/200 Normal, cross-group {cross_ok}/200 Reduced, accuracy {:.2}% (need >= 99%)", acc * 100.0),
    )
}

fn criterion_4() -> Outcome {
    let cases: [(&str, Vec<ComponentClass>, u32); 4] = [
        ("intel-a-1ch-1dpc", vec![Channel], 0),
        ("intel-a-1ch-1dpc", vec![DimmRank], 1),
        ("intel-a-1ch-2dpc", vec![DimmRank], 2),
        ("intel-a-2ch-2dpc", vec![Channel, DimmRank], 3),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, classes, k) in cases {
        let m = by_name(name).unwrap().mapping();
        let mode = RefreshMode::new(RefreshKind::AllBank, classes).unwrap();
        let actual = m.functions().iter().filter(|f| mode.includes(f.label)).count() as u32;
        assert_eq!(actual, k, "{name}");
        let hits = par_seeds(0..RUNS, |seed| {
            let sim = Simulator::new(m.clone(), TimingConfig::default(), mode.clone(), NoiseModel::gaussian(SIGMA, seed))
                .unwrap();
            let mut o = SimOracle::new(sim, seed ^ 0x77);
            let mut cfg = PipelineConfig::for_mapping(&m);
            cfg.samples.refresh_count_pairs = 500;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            estimate_refresh_function_count(&mut o, &cfg, &mut rng).is_ok_and(|e| e.functions == k)
        })
        .into_iter()
        .filter(|&x| x)
        .count();
        pass &= hits >= MIN_SUCCESSES;
        parts.push(format!("k={k} {hits}/{RUNS}"));
    }
    outcome(pass, format!("{} (need >= {MIN_SUCCESSES} each)", parts.join(", ")))
}

/// Channel and sub-channel share one spacing, so they count as one class.
fn merged(c: ComponentClass) -> ComponentClass {
    if c == SubChannel {
        Channel
    } else {
        c
    }
}

fn consecutive_run(r: &ReferenceMapping, timing: &TimingConfig, seed: u64) -> Option<Vec<dramdecomp::pipeline::LabelDecision>> {
    let truth = r.mapping();
    let sim = Simulator::new(truth.clone(), timing.clone(), r.refresh_mode(), NoiseModel::gaussian(SIGMA, seed)).ok()?;
    let mut o = SimOracle::new(sim, seed ^ 0x9e37_79b9);
    let mut cfg = PipelineConfig::for_mapping(&truth);
    cfg.timing_hints = TimingHints::from(timing);
    cfg.samples.stream_samples = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bare = unlabeled(&truth);
    let refresh: Vec<Option<RefreshClass>> = group_by_refresh(&mut o, &bare, &cfg, timing.t_refi as f64, &mut rng)
        .ok()?
        .into_iter()
        .map(|v| v.and_then(Result::ok).map(|v| v.classification))
        .collect();
    classify_by_consecutive(&mut o, &bare, &cfg, &refresh, &mut rng)
        .ok()?
        .into_iter()
        .map(|e| e.decision.ok())
        .collect()
}

fn criterion_5() -> Outcome {
    let timing = TimingConfig::default();
    let mut worst = (usize::MAX, "");
    for r in REFERENCES {
        let truth = r.mapping();
        let good = par_seeds(0..RUNS, |seed| {
            consecutive_run(&r, &timing, seed).is_some_and(|d| {
                d.iter()
                    .zip(truth.functions())
                    .all(|(d, f)| merged(d.label) == merged(f.label))
            })
        })
        .into_iter()
        .filter(|&x| x)
        .count();
        if good < worst.0 {
            worst = (good, r.name);
        }
    }

    // Rank and DIMM spacing equal: the merged label, on every run.
    let equal = TimingConfig {
        t_rdrd_dr: 7,
        t_rdrd_dd: 7,
        ..TimingConfig::default()
    };
    let r = by_name("intel-a-2ch-2dpc").unwrap();
    let truth = r.mapping();
    let merged_runs = par_seeds(0..20, |seed| {
        consecutive_run(&r, &equal, seed).is_some_and(|d| {
            d.iter().zip(truth.functions()).filter(|(_, f)| f.label == DimmRank).all(|(d, _)| {
                d.label == DimmRank && d.detail == Some("dimm_or_rank")
            })
        })
    })
    .into_iter()
    .filter(|&x| x)
    .count();
    outcome(
        worst.0 >= MIN_SUCCESSES && merged_runs == 20,
        format!(
            "worst config {} {}/{RUNS} all functions correct (need >= {MIN_SUCCESSES}); dr = dd merged label {merged_runs}/20 (need 20)",
            worst.1, worst.0
        ),
    )
}

/// Decode key computed without the library: per-function parities in list
/// order, then the row and column bits.
fn naive_key(m: &DramAddressMapping, addr: u64) -> (u64, u64, u64) {
    let parities = m
        .functions()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, f)| acc | (naive_parity(f.mask.0, addr) as u64) << i);
    let gather = |mask: BitMask| {
        (0..64)
            .filter(|&b| mask.0 >> b & 1 == 1)
            .enumerate()
            .fold(0u64, |acc, (i, b)| acc | (addr >> b & 1) << i)
    };
    (parities, gather(m.row_mask()), gather(m.col_mask()))
}

fn criterion_6() -> Outcome {
    let mut collisions = 0;
    let mut slowest = 0.0f64;
    for r in REFERENCES {
        let start = Instant::now();
        let m = r.mapping();
        let mut seen: HashMap<(u64, u64, u64), u64> = HashMap::with_capacity(1 << 20);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1u32 << 20 {
            let a = rng.random::<u64>() & m.address_bits().0;
            if let Some(&prev) = seen.get(&naive_key(&m, a)) {
                collisions += (prev != a) as usize;
            } else {
                seen.insert(naive_key(&m, a), a);
            }
        }
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }

    let mut broken = vec![INTEL_BC_1CH_1DPC_RAW.mapping()];
    for r in REFERENCES {
        let m = r.mapping();
        for i in 0..m.functions().len() {
            let mut f = m.functions().to_vec();
            f.remove(i);
            broken.push(m.with_functions(f).unwrap());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let exhibited = broken
        .iter()
        .filter(|m| {
            let start = Instant::now();
            let ok = !m.is_injective()
                && m.collision_delta().is_some_and(|d| {
                    let a = rng.random::<u64>() & m.address_bits().0;
                    d != BitMask::EMPTY && naive_key(m, a) == naive_key(m, a ^ d.0) && m.decode(a) == m.decode(a ^ d.0)
                });
            slowest = slowest.max(start.elapsed().as_secs_f64());
            ok
        })
        .count();
    outcome(
        collisions == 0 && exhibited == broken.len() && slowest <= 30.0,
        format!(
            "12 injective mappings x 2^20 addresses: {collisions} collisions; {exhibited}/{} non-injective mappings with a colliding pair; slowest mapping {slowest:.2}s (need <= 30s)",
            broken.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    const CASES: u32 = 10_000;
    let mut failures = Vec::new();
    let mut run = |name: &str, r: Result<(), String>| {
        if let Err(e) = r {
            failures.push(format!("{name}: {e}"));
        }
    };
    let runner = || {
        TestRunner::new(Config {
            failure_persistence: None,
            ..Config::with_cases(CASES)
        })
    };

    run(
        "linearity",
        runner()
            .run(&(any::<u64>(), any::<u64>(), any::<u64>()), |(m, a, b)| check_linearity(m, a, b))
            .map_err(|e| e.to_string()),
    );
    let sized = (1u32..=20).prop_flat_map(|w| (Just(w), masks_within(w, 12)));
    run(
        "rank-nullity",
        runner()
            .run(&sized, |(w, masks)| check_rank_nullity(&masks, w))
            .map_err(|e| e.to_string()),
    );
    run(
        "span laws",
        runner()
            .run(
                &(masks_within(16, 8), masks_within(16, 8), prop::collection::vec(any::<u64>(), 8)),
                |(a, b, mix)| check_span_laws(&a, &b, &mix),
            )
            .map_err(|e| e.to_string()),
    );
    run(
        "solve_delta",
        runner()
            .run(&prop::collection::vec((1u64..1 << 10, any::<bool>()), 0..12), |c| {
                check_solve_delta(&c, 10)
            })
            .map_err(|e| e.to_string()),
    );
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("linearity, rank-nullity (exhaustive, universes up to 20 bits), span laws, solve_delta: {CASES} cases each")
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_8() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_dramdecomp");
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let report_arg = report.display().to_string();
    let commands: Vec<Vec<&str>> = vec![
        vec!["simulate", "--mapping", "ref:intel-a-1ch-1dpc", "--trace", "pair:0x0,0x2a00,5000", "--seed", "7"],
        vec!["simulate", "--mapping", "ref:amd-a-2ch-1dpc", "--trace", "pair:0x40,0x100,5000", "--seed", "7", "--histogram"],
        vec!["recover", "--mapping", "ref:amd-a-1ch-1dpc", "--seed", "7"],
        vec!["decompose", "--mapping", "ref:intel-bc-2ch-1dpc", "--seed", "7"],
        vec!["verify", "--report", &report_arg, "--mapping", "ref:intel-bc-2ch-1dpc"],
        vec!["report", "--report", &report_arg, "--format", "csv"],
        vec!["report", "--mapping", "ref:intel-a-2ch-2dpc", "--seed", "7"],
    ];
    let mut differing = Vec::new();
    for args in &commands {
        let once = || Command::new(bin).args(args).output().expect("binary runs");
        let (a, b) = (once(), once());
        if a.stdout != b.stdout || a.status.code() != b.status.code() || a.stdout.is_empty() {
            differing.push(args[0]);
        }
        if args[0] == "decompose" {
            std::fs::write(&report, &a.stdout).unwrap();
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "{} commands run twice, {} differing{}",
            commands.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "round trip on all reference mappings", criterion_1),
        (2, "injectivity and repair", criterion_2),
        (3, "refresh classification", criterion_3),
        (4, "refresh-count estimation", criterion_4),
        (5, "consecutive-access separation", criterion_5),
        (6, "brute-force decode oracle", criterion_6),
        (7, "GF(2) property suite", criterion_7),
        (8, "CLI determinism", criterion_8),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        failed += !o.pass as usize;
        println!(
            "criterion {n} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
