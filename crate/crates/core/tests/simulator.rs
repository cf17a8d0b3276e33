mod common;

use common::simulator;
use dramdecomp::mapping::ComponentClass::*;
use dramdecomp::pipeline::function_delta;
use dramdecomp::reference::{by_name, INTEL_BC_1CH_1DPC_RAW};
use dramdecomp::sim::{NoiseModel, RefreshKind, RefreshMode, SimError, Simulator, TimingConfig};
use dramdecomp::DramAddressMapping;

fn intel_a() -> DramAddressMapping {
    by_name("intel-a-1ch-1dpc").unwrap().mapping()
}

fn index_of(m: &DramAddressMapping, mask: u64) -> usize {
    m.functions().iter().position(|f| f.mask.0 == mask).unwrap()
}

fn quiet(m: DramAddressMapping, refresh: RefreshMode) -> Simulator {
    simulator(m, refresh, 0.0, 0)
}

#[test]
fn construction() {
    assert!(Simulator::new(intel_a(), TimingConfig::default(), RefreshMode::default(), NoiseModel::none(0)).is_ok());
    let raw = INTEL_BC_1CH_1DPC_RAW.mapping();
    assert!(matches!(
        Simulator::new(raw, TimingConfig::default(), RefreshMode::default(), NoiseModel::none(0)),
        Err(SimError::InvalidMapping)
    ));
}

#[test]
fn equal_seeds_give_equal_latencies() {
    let trace: Vec<(u64, u64)> = (0..5000u64).map(|i| ((i * 0x9e37_79b9_7f4a) & 0x7_ffff_ffc0, i % 7)).collect();
    let mut a = simulator(intel_a(), RefreshMode::default(), 2.0, 11);
    let mut b = simulator(intel_a(), RefreshMode::default(), 2.0, 11);
    assert_eq!(a.run_trace(&trace), b.run_trace(&trace));
    let mut c = simulator(intel_a(), RefreshMode::default(), 2.0, 12);
    assert_ne!(a.run_trace(&trace), c.run_trace(&trace));
}

#[test]
fn row_hit_and_conflict_latencies() {
    let t = TimingConfig::default();
    let mut s = quiet(intel_a(), RefreshMode::default());
    let a = 0x4000_0000;
    // Cold bank, then a row hit after a long gap (away from refresh).
    s.access(a, 0);
    assert_eq!(s.access(a ^ 0x40, 200), t.base_hit_latency);
    // Same bank, other row.
    let m = intel_a();
    let same_bank = dramdecomp::gf2::Gf2System::dedup(m.function_masks())
        .echelon()
        .kernel_within(m.address_bits());
    let other_row = a ^ same_bank.iter().find(|v| v.highest_bit() == Some(34)).unwrap().0;
    assert_eq!(m.bank_key(a), m.bank_key(other_row));
    assert_ne!(m.decode(a).row, m.decode(other_row).row);
    assert_eq!(s.access(other_row, 200), t.base_hit_latency + t.t_rp + t.t_rcd);
}

#[test]
fn bank_group_spacing_difference() {
    let t = TimingConfig::default();
    let m = intel_a();
    let dg = function_delta(&m, index_of(&m, 0x2a00)).unwrap();
    let sg = function_delta(&m, index_of(&m, 0x0249910000)).unwrap();
    let median = |delta: u64| {
        let mut s = quiet(m.clone(), RefreshMode::new(RefreshKind::AllBank, vec![DimmRank]).unwrap());
        let a = 0x1_0000_0000;
        let trace: Vec<(u64, u64)> = (0..200).flat_map(|_| [(a, 0), (a ^ delta, 0)]).collect();
        let series = s.run_trace(&trace);
        // Median, so that an occasional refresh stall does not count.
        let mut tail: Vec<u64> = series.latencies().skip(10).collect();
        tail.sort_unstable();
        tail[tail.len() / 2]
    };
    assert_eq!(median(sg.0) - median(dg.0), t.t_rdrd_sg - t.t_rdrd_dg);
}

#[test]
fn empty_trace_gives_empty_series() {
    let mut s = quiet(intel_a(), RefreshMode::default());
    assert!(s.run_trace(&[]).is_empty());
}

/// Completion times of accesses whose latency exceeds `cut`.
fn spike_ends(series: &dramdecomp::sim::LatencySeries, cut: u64) -> Vec<u64> {
    series.samples().iter().filter(|s| s.1 > cut).map(|s| s.0 + s.1).collect()
}

#[test]
fn same_group_refresh_spikes_are_periodic() {
    let t = TimingConfig::default();
    let mut s = quiet(intel_a(), RefreshMode::default());
    let a = 0x2_0000_0000;
    let mut trace = Vec::new();
    let mut horizon = 0u64;
    // At least 10 refresh intervals of back-to-back self-pair accesses.
    while horizon < 10 * t.t_refi {
        trace.push((a, 2));
        trace.push((a ^ 0x40, 2));
        horizon += 2 * (t.base_hit_latency + 2);
    }
    let series = s.run_trace(&trace);
    let big: Vec<&(u64, u64)> = series.samples().iter().filter(|x| x.1 > t.t_rfc / 2).collect();
    assert!(big.len() >= 10, "{} spikes", big.len());
    assert!(big.iter().all(|x| x.1 + 2 * (t.base_hit_latency + 2) >= t.t_rfc));
    let ends = spike_ends(&series, t.t_rfc / 2);
    for w in ends.windows(2) {
        assert_eq!(w[1] - w[0], t.t_refi);
    }
}

#[test]
fn split_groups_halve_the_spike_interval() {
    let t = TimingConfig::default();
    let m = by_name("intel-bc-1ch-1dpc").unwrap().mapping();
    let refresh = RefreshMode::new(RefreshKind::FineGrained, vec![Channel]).unwrap();
    let mut s = quiet(m.clone(), refresh);
    assert_eq!(s.refresh_group_count(), 2);
    let d = function_delta(&m, index_of(&m, 0xc3200)).unwrap();
    let a = 0x1_2000_0000;
    assert_ne!(s.refresh_group(a), s.refresh_group(a ^ d.0));
    let trace: Vec<(u64, u64)> = (0..3000).flat_map(|_| [(a, 0), (a ^ d.0, 0)]).collect();
    let series = s.run_trace(&trace);
    let ends = spike_ends(&series, t.t_rfc / 2);
    let gaps: Vec<u64> = ends.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(gaps.len() >= 10);
    let mean = gaps.iter().sum::<u64>() as f64 / gaps.len() as f64;
    assert!((mean - t.t_refi as f64 / 2.0).abs() < 100.0, "mean gap {mean}");
    assert!(gaps.iter().all(|&g| g < t.t_refi));
}

#[test]
fn accesses_outside_refreshing_groups_are_never_blocked() {
    let t = TimingConfig::default();
    let m = by_name("intel-bc-2ch-2dpc").unwrap().mapping();
    let mut s = quiet(m.clone(), by_name("intel-bc-2ch-2dpc").unwrap().refresh_mode());
    let limit = t.base_hit_latency + t.t_rp + t.t_rcd + t.t_rdrd_sg.max(t.t_rdrd_dd);
    let mut x = 0x1234_5678_9abcu64;
    for i in 0..20_000u64 {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        let addr = x & m.address_bits().0;
        let group = s.refresh_group(addr);
        let (issue, lat) = s.access_sample(addr, i % 50);
        if s.refresh_wait(group, issue) == 0 {
            assert!(lat <= limit, "unblocked access took {lat}");
        }
    }
}
