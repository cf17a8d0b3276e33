//! Statistics over latency observations from an access oracle.
//!
//! The [`AccessOracle`] trait is the only contact with the memory system;
//! [`SimOracle`] backs it with the simulator.

pub mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf2::PhysAddr;
use crate::mapping::DramAddressMapping;
use crate::sim::{LatencySeries, Simulator};

use stats::{robust_center_scale, two_means};

/// Source of timing measurements. Each call is an independent measurement:
/// implementations reset or randomize bank state first.
pub trait AccessOracle {
    /// Alternates `a, b` for `rounds` rounds (`2 * rounds` samples).
    fn time_pair(&mut self, a: PhysAddr, b: PhysAddr, rounds: usize) -> LatencySeries;

    /// Interleaves the streams element-wise (`a[0], b[0], a[1], b[1], ...`)
    /// and repeats the whole pass `rounds` times.
    fn time_streams(&mut self, a: &[PhysAddr], b: &[PhysAddr], rounds: usize) -> LatencySeries;
}

/// Simulator-backed oracle. Before each call it precharges all banks and
/// idles a random fraction of a refresh interval, so refresh phase differs
/// between measurements.
#[derive(Clone, Debug)]
pub struct SimOracle {
    sim: Simulator,
    rng: ChaCha8Rng,
}

impl SimOracle {
    pub fn new(sim: Simulator, seed: u64) -> Self {
        Self {
            sim,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn into_inner(self) -> Simulator {
        self.sim
    }

    fn prepare(&mut self) {
        self.sim.close_all_banks();
        let span = self.sim.timing().t_refi;
        let idle = self.rng.random_range(0..span);
        self.sim.idle(idle);
    }
}

impl AccessOracle for SimOracle {
    fn time_pair(&mut self, a: PhysAddr, b: PhysAddr, rounds: usize) -> LatencySeries {
        self.prepare();
        let mut s = LatencySeries::with_capacity(2 * rounds);
        for _ in 0..rounds {
            let (t, l) = self.sim.access_sample(a, 0);
            s.push(t, l);
            let (t, l) = self.sim.access_sample(b, 0);
            s.push(t, l);
        }
        s
    }

    fn time_streams(&mut self, a: &[PhysAddr], b: &[PhysAddr], rounds: usize) -> LatencySeries {
        self.prepare();
        let n = a.len().min(b.len());
        let mut s = LatencySeries::with_capacity(2 * n * rounds);
        for _ in 0..rounds {
            for i in 0..n {
                let (t, l) = self.sim.access_sample(a[i], 0);
                s.push(t, l);
                let (t, l) = self.sim.access_sample(b[i], 0);
                s.push(t, l);
            }
        }
        s
    }
}

impl<O: AccessOracle + ?Sized> AccessOracle for &mut O {
    fn time_pair(&mut self, a: PhysAddr, b: PhysAddr, rounds: usize) -> LatencySeries {
        (**self).time_pair(a, b, rounds)
    }

    fn time_streams(&mut self, a: &[PhysAddr], b: &[PhysAddr], rounds: usize) -> LatencySeries {
        (**self).time_streams(a, b, rounds)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("latencies do not separate into two clusters (centers {low:.1} and {high:.1}, jitter {jitter:.2})")]
    DegenerateDistribution { low: f64, high: f64, jitter: f64 },
    #[error("{verdict:?} verdict has confidence {confidence:.3} below the minimum")]
    LowConfidence { verdict: Access, confidence: f64 },
    #[error("no refresh spikes detected")]
    NoSpikesDetected,
    #[error("a stream does not stay within one bank and row")]
    StreamsNotRowHit,
    #[error("no usable samples")]
    NoSamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    Hit,
    Conflict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConflictVerdict {
    pub verdict: Access,
    /// Fraction of samples on the verdict's side of the threshold.
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshClass {
    Normal,
    Reduced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RefreshVerdict {
    pub interval_estimate: f64,
    pub classification: RefreshClass,
    pub spike_count: usize,
    /// Interval the estimate was compared with.
    pub reference: f64,
    /// Number of distinct periodic spike trains found.
    pub trains: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RefreshReference {
    Known(f64),
    /// Measure the reference from the self pair `(a, a)`, which shares one
    /// refresh group by construction.
    Unknown,
}

/// Latency histogram with 1-cycle bins and its smoothed peak.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StreamDistribution {
    /// `(latency, count)` for every bin between the smallest and largest
    /// kept latency.
    pub histogram: Vec<(u64, u64)>,
    pub peak: u64,
    pub samples: usize,
    pub excluded: usize,
}

impl StreamDistribution {
    /// CSV with header `latency_cycles,count`.
    pub fn to_csv(&self) -> String {
        histogram_csv(&self.histogram)
    }
}

pub fn histogram_csv(hist: &[(u64, u64)]) -> String {
    let mut out = String::from("latency_cycles,count\n");
    for (l, c) in hist {
        let _ = writeln!(out, "{l},{c}");
    }
    out
}

/// Default minimum confidence for conflict votes.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.9;
/// Default spike threshold in robust standard deviations.
pub const DEFAULT_K_SIGMA: f64 = 4.0;
/// A spike sample completing within this many cycles of the previous spike
/// sample's completion belongs to the same refresh event (the blocked
/// access plus the closed-bank accesses right after it).
pub const SPIKE_MERGE_WINDOW: u64 = 256;
/// Folded event phases closer than this (cycles) belong to one train.
pub const PHASE_LINK_WINDOW: u64 = 1024;
/// Samples discarded at the start of each pair measurement (cold banks).
pub const WARMUP_SAMPLES: usize = 2;
/// Latencies this far above a measurement's median are treated as refresh
/// blocking, not row-buffer behaviour.
const SPIKE_FLOOR: f64 = 64.0;
/// Ratio of within-cluster spread to sigma when a unimodal Gaussian is cut
/// at its mean (`sqrt(1 - 2/pi)`).
const HALF_NORMAL_SD: f64 = 0.6028;

fn drop_spikes(latencies: &[u64]) -> Vec<u64> {
    match robust_center_scale(latencies, 1.0) {
        Some((m, s)) => {
            let cut = m + (6.0 * s).max(SPIKE_FLOOR);
            latencies.iter().copied().filter(|&l| (l as f64) <= cut).collect()
        }
        None => Vec::new(),
    }
}

/// Threshold from already-collected latencies: midpoint of the two-means
/// centers, rejected when the centers are closer than twice the jitter.
pub fn threshold_from_samples(latencies: &[u64]) -> Result<f64, ProbeError> {
    let tm = two_means(latencies).ok_or(ProbeError::DegenerateDistribution {
        low: latencies.first().copied().unwrap_or(0) as f64,
        high: latencies.first().copied().unwrap_or(0) as f64,
        jitter: 0.0,
    })?;
    let jitter = tm.within_sd / HALF_NORMAL_SD;
    if tm.high_center - tm.low_center < 2.0 * jitter {
        return Err(ProbeError::DegenerateDistribution {
            low: tm.low_center,
            high: tm.high_center,
            jitter,
        });
    }
    Ok(tm.threshold())
}

/// Measures every pair, drops warm-up samples and refresh spikes per pair,
/// and splits the pooled latencies into hit and conflict clusters.
pub fn fit_threshold<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    calibration_pairs: &[(PhysAddr, PhysAddr)],
    rounds: usize,
) -> Result<f64, ProbeError> {
    let mut pooled = Vec::with_capacity(calibration_pairs.len() * 2 * rounds);
    for &(a, b) in calibration_pairs {
        let s = oracle.time_pair(a, b, rounds);
        let lat: Vec<u64> = s.latencies().skip(WARMUP_SAMPLES).collect();
        pooled.extend(drop_spikes(&lat));
    }
    threshold_from_samples(&pooled)
}

/// Majority vote of post-warm-up latencies against `threshold`.
pub fn measure_conflict<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    a: PhysAddr,
    b: PhysAddr,
    threshold: f64,
    rounds: usize,
    min_confidence: f64,
) -> Result<ConflictVerdict, ProbeError> {
    let s = oracle.time_pair(a, b, rounds);
    let lat: Vec<u64> = s.latencies().skip(WARMUP_SAMPLES).collect();
    if lat.is_empty() {
        return Err(ProbeError::NoSamples);
    }
    let above = lat.iter().filter(|&&l| l as f64 > threshold).count();
    let frac = above as f64 / lat.len() as f64;
    let (verdict, confidence) = if frac > 0.5 {
        (Access::Conflict, frac)
    } else {
        (Access::Hit, 1.0 - frac)
    };
    if confidence < min_confidence {
        return Err(ProbeError::LowConfidence { verdict, confidence });
    }
    Ok(ConflictVerdict { verdict, confidence })
}

/// Timestamps of refresh-like events: samples above
/// `median + k_sigma * max(1.4826 * MAD, 1)`, with chains of spike samples
/// whose completions (issue time plus latency) lie at most
/// [`SPIKE_MERGE_WINDOW`] apart collapsed to their first issue time.
/// Completion times keep apart refreshes of two groups that overlap in
/// time: the second blocked access is issued as soon as the first
/// completes, but it completes one group offset later.
pub fn detect_spikes(series: &LatencySeries, k_sigma: f64) -> Vec<u64> {
    detect_spikes_windowed(series, k_sigma, SPIKE_MERGE_WINDOW)
}

pub fn detect_spikes_windowed(series: &LatencySeries, k_sigma: f64, window: u64) -> Vec<u64> {
    let lat: Vec<u64> = series.latencies().collect();
    let Some((m, s)) = robust_center_scale(&lat, 1.0) else {
        return Vec::new();
    };
    let cut = m + k_sigma * s;
    let mut events = Vec::new();
    let mut last_spike: Option<u64> = None;
    for &(t, l) in series.samples() {
        if l as f64 > cut {
            let end = t + l;
            if last_spike.is_none_or(|p| end.saturating_sub(p) > window) {
                events.push(t);
            }
            last_spike = Some(end);
        }
    }
    events
}

/// Keeps events that belong to a periodic train of period `period`: events
/// are folded modulo the period, phases are linked when closer than
/// [`PHASE_LINK_WINDOW`] (circularly), and clusters holding at least
/// `max(2, 0.3 * expected)` events survive. Returns the kept events in time
/// order and the number of trains.
pub fn periodic_events(events: &[u64], period: f64, duration: u64) -> (Vec<u64>, usize) {
    if events.is_empty() || period <= 0.0 {
        return (Vec::new(), 0);
    }
    let p = period;
    let mut phased: Vec<(f64, u64)> = events.iter().map(|&t| ((t as f64).rem_euclid(p), t)).collect();
    phased.sort_by(|x, y| x.0.total_cmp(&y.0));
    let tol = PHASE_LINK_WINDOW as f64;
    let mut clusters: Vec<Vec<u64>> = vec![vec![phased[0].1]];
    for w in phased.windows(2) {
        if w[1].0 - w[0].0 <= tol {
            clusters.last_mut().unwrap().push(w[1].1);
        } else {
            clusters.push(vec![w[1].1]);
        }
    }
    if clusters.len() > 1 {
        let wrap = phased[0].0 + p - phased[phased.len() - 1].0;
        if wrap <= tol {
            let first = clusters.remove(0);
            clusters.last_mut().unwrap().extend(first);
        }
    }
    let expected = duration as f64 / p;
    let min_size = ((0.3 * expected).ceil() as usize).max(2);
    let mut kept = Vec::new();
    let mut trains = 0;
    for c in clusters {
        if c.len() >= min_size {
            trains += 1;
            kept.extend(c);
        }
    }
    kept.sort_unstable();
    (kept, trains)
}

fn reference_from_self_pair<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    a: PhysAddr,
    samples: usize,
) -> Result<f64, ProbeError> {
    let s = oracle.time_pair(a, a, samples.div_ceil(2));
    let events = detect_spikes(&s, DEFAULT_K_SIGMA);
    let gaps: Vec<u64> = events.windows(2).map(|w| w[1] - w[0]).collect();
    stats::median(&gaps).map(|g| g as f64).ok_or(ProbeError::NoSpikesDetected)
}

/// Measures the refresh reference interval from the self pair `(a, a)`.
pub fn measure_reference_interval<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    a: PhysAddr,
    samples: usize,
) -> Result<f64, ProbeError> {
    reference_from_self_pair(oracle, a, samples)
}

/// Times the pair `(a, b)` over `samples` accesses and compares the mean
/// spacing of its periodic refresh spikes against the reference interval.
/// Pairs spanning two refresh groups see two interleaved trains, so the
/// spacing drops below `0.75 * reference`.
pub fn classify_refresh_interval<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    a: PhysAddr,
    b: PhysAddr,
    reference: RefreshReference,
    samples: usize,
) -> Result<RefreshVerdict, ProbeError> {
    let reference = match reference {
        RefreshReference::Known(t) => t,
        RefreshReference::Unknown => reference_from_self_pair(oracle, a, samples)?,
    };
    let s = oracle.time_pair(a, b, samples.div_ceil(2));
    classify_refresh_series(&s, reference)
}

/// Offline form of [`classify_refresh_interval`] for a recorded series.
pub fn classify_refresh_series(series: &LatencySeries, reference: f64) -> Result<RefreshVerdict, ProbeError> {
    let events = detect_spikes(series, DEFAULT_K_SIGMA);
    let (kept, trains) = periodic_events(&events, reference, series.duration());
    if kept.len() < 2 {
        return Err(ProbeError::NoSpikesDetected);
    }
    let interval = (kept[kept.len() - 1] - kept[0]) as f64 / (kept.len() - 1) as f64;
    let classification = if interval < 0.75 * reference {
        RefreshClass::Reduced
    } else {
        RefreshClass::Normal
    };
    Ok(RefreshVerdict {
        interval_estimate: interval,
        classification,
        spike_count: kept.len(),
        reference,
        trains,
    })
}

/// True iff every address of `stream` maps to one bank and one row.
pub fn is_row_hit_stream(mapping: &DramAddressMapping, stream: &[PhysAddr]) -> bool {
    match stream.first() {
        None => false,
        Some(&first) => stream.iter().all(|&x| {
            mapping.same_bank(first, x) && mapping.same_component(first, x, crate::mapping::ComponentClass::Row)
        }),
    }
}

/// Histograms interleaved-stream latencies and returns the smoothed peak.
/// Refresh-blocked and cold-bank samples (above `median + 4` robust sigmas)
/// are excluded first.
pub fn measure_stream_distribution<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    mapping: &DramAddressMapping,
    stream_a: &[PhysAddr],
    stream_b: &[PhysAddr],
    rounds: usize,
) -> Result<StreamDistribution, ProbeError> {
    if !is_row_hit_stream(mapping, stream_a) || !is_row_hit_stream(mapping, stream_b) {
        return Err(ProbeError::StreamsNotRowHit);
    }
    let s = oracle.time_streams(stream_a, stream_b, rounds);
    distribution_from_series(&s)
}

/// Offline form of [`measure_stream_distribution`].
pub fn distribution_from_series(series: &LatencySeries) -> Result<StreamDistribution, ProbeError> {
    let lat: Vec<u64> = series.latencies().collect();
    let (m, s) = robust_center_scale(&lat, 1.0).ok_or(ProbeError::NoSamples)?;
    let cut = m + DEFAULT_K_SIGMA * s;
    let mut bins: BTreeMap<u64, u64> = BTreeMap::new();
    let mut kept = 0;
    for &l in &lat {
        if l as f64 <= cut {
            *bins.entry(l).or_default() += 1;
            kept += 1;
        }
    }
    let (&lo, _) = bins.first_key_value().ok_or(ProbeError::NoSamples)?;
    let (&hi, _) = bins.last_key_value().ok_or(ProbeError::NoSamples)?;
    let histogram: Vec<(u64, u64)> = (lo..=hi).map(|l| (l, bins.get(&l).copied().unwrap_or(0))).collect();
    let counts: Vec<u64> = histogram.iter().map(|h| h.1).collect();
    let mut best = (0u64, lo);
    for i in 0..counts.len() {
        let smooth = counts[i] + if i > 0 { counts[i - 1] } else { 0 } + counts.get(i + 1).copied().unwrap_or(0);
        if smooth > best.0 {
            best = (smooth, histogram[i].0);
        }
    }
    Ok(StreamDistribution {
        histogram,
        peak: best.1,
        samples: kept,
        excluded: lat.len() - kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(lat: &[u64]) -> LatencySeries {
        let mut s = LatencySeries::new();
        let mut t = 0;
        for &l in lat {
            s.push(t, l);
            t += l;
        }
        s
    }

    #[test]
    fn threshold_examples() {
        let mut v = vec![50u64; 500];
        v.extend(vec![82u64; 500]);
        assert_eq!(threshold_from_samples(&v).unwrap(), 66.0);
        assert!(matches!(
            threshold_from_samples(&[60u64; 100]),
            Err(ProbeError::DegenerateDistribution { .. })
        ));
    }

    #[test]
    fn unimodal_gaussian_is_degenerate() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(60.0, 2.0).unwrap();
        let v: Vec<u64> = (0..5000).map(|_| Distribution::<f64>::sample(&n, &mut rng).round() as u64).collect();
        assert!(threshold_from_samples(&v).is_err());
    }

    #[test]
    fn flat_series_has_no_spikes() {
        assert!(detect_spikes(&series(&[58; 500]), 4.0).is_empty());
    }

    #[test]
    fn spike_chains_collapse() {
        let mut lat = vec![58u64; 300];
        lat[100] = 700;
        lat[101] = 80;
        lat[250] = 700;
        let ev = detect_spikes(&series(&lat), 4.0);
        assert_eq!(ev.len(), 2);
    }

    #[test]
    fn overlapping_refreshes_stay_apart() {
        let mut lat = vec![58u64; 300];
        lat[100] = 700;
        lat[101] = 640;
        assert_eq!(detect_spikes(&series(&lat), 4.0).len(), 2);
    }

    #[test]
    fn periodic_filter_drops_isolated_events() {
        let mut ev: Vec<u64> = (0..30).map(|i| 100 + i * 9360).collect();
        ev.push(5000);
        ev.sort();
        let (kept, trains) = periodic_events(&ev, 9360.0, 30 * 9360);
        assert_eq!(trains, 1);
        assert_eq!(kept.len(), 30);
    }

    #[test]
    fn histogram_peak_smoothed() {
        let mut lat = vec![57u64; 10];
        lat.extend(vec![58u64; 30]);
        lat.extend(vec![59u64; 12]);
        lat.extend(vec![62u64; 31]);
        let d = distribution_from_series(&series(&lat)).unwrap();
        assert_eq!(d.peak, 58);
        assert!(d.to_csv().starts_with("latency_cycles,count\n57,10\n"));
    }
}
