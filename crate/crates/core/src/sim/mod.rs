//! Cycle-level memory-controller timing simulator.
//!
//! Each access pays a base hit latency, a row-buffer penalty (closed bank or
//! conflict), a read-to-read spacing penalty chosen by how its coordinate
//! relates to the previous access, any wait for an in-progress refresh of
//! its refresh group, and noise. Refresh windows are closed-form: group `g`
//! of `G` starts refreshing at `t_refi * (g + 1) / G` and every `t_refi`
//! after that, blocking for `t_rfc` and closing the group's open rows.

mod config;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

pub use config::{
    load_timing, store_timing, ConfigError, NoiseModel, RefreshKind, RefreshMode, SimSettings, TimingConfig,
};

use crate::gf2::PhysAddr;
use crate::mapping::{DramAddressMapping, DramCoordinate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("mapping is not injective")]
    InvalidMapping,
    #[error("address {0:#x} is outside the mapping's address range")]
    AddressOutOfRange(PhysAddr),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Ordered `(timestamp, latency)` samples in cycles; timestamps strictly
/// increase.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LatencySeries {
    samples: Vec<(u64, u64)>,
}

impl LatencySeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            samples: Vec::with_capacity(n),
        }
    }

    /// Builds a series from raw samples; `None` unless timestamps strictly
    /// increase.
    pub fn from_samples(samples: Vec<(u64, u64)>) -> Option<Self> {
        samples
            .windows(2)
            .all(|w| w[0].0 < w[1].0)
            .then_some(Self { samples })
    }

    /// Appends a sample. Panics if `timestamp` does not increase.
    pub fn push(&mut self, timestamp: u64, latency: u64) {
        if let Some(&(last, _)) = self.samples.last() {
            assert!(timestamp > last, "timestamps must strictly increase");
        }
        self.samples.push((timestamp, latency));
    }

    pub fn samples(&self) -> &[(u64, u64)] {
        &self.samples
    }

    pub fn latencies(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(|s| s.1)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Span from the first to the last timestamp.
    pub fn duration(&self) -> u64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0,
        }
    }

    /// CSV with header `index,timestamp_cycles,latency_cycles`.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(24 * (self.samples.len() + 1));
        out.push_str("index,timestamp_cycles,latency_cycles\n");
        for (i, (t, l)) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "{i},{t},{l}");
        }
        out
    }
}

#[derive(Clone, Debug)]
enum BankTable {
    Dense(Vec<Option<(u64, u64)>>),
    Sparse(HashMap<u64, (u64, u64)>),
}

impl BankTable {
    fn new(functions: usize) -> Self {
        if functions <= 16 {
            BankTable::Dense(vec![None; 1 << functions])
        } else {
            BankTable::Sparse(HashMap::new())
        }
    }

    fn get(&self, key: u64) -> Option<(u64, u64)> {
        match self {
            BankTable::Dense(v) => v[key as usize],
            BankTable::Sparse(m) => m.get(&key).copied(),
        }
    }

    fn set(&mut self, key: u64, state: (u64, u64)) {
        match self {
            BankTable::Dense(v) => v[key as usize] = Some(state),
            BankTable::Sparse(m) => {
                m.insert(key, state);
            }
        }
    }

    fn clear(&mut self) {
        match self {
            BankTable::Dense(v) => v.fill(None),
            BankTable::Sparse(m) => m.clear(),
        }
    }
}

/// Mutable timing state machine over a fixed mapping.
#[derive(Clone, Debug)]
pub struct Simulator {
    mapping: DramAddressMapping,
    timing: TimingConfig,
    refresh: RefreshMode,
    noise: NoiseModel,
    rng: ChaCha8Rng,
    jitter: Option<Normal<f64>>,
    refresh_masks: Vec<u64>,
    groups: u64,
    /// Open row and refresh epoch per bank key.
    banks: BankTable,
    /// Completion time of the previous access.
    ready: u64,
    last: Option<DramCoordinate>,
}

impl Simulator {
    pub fn new(
        mapping: DramAddressMapping,
        timing: TimingConfig,
        refresh: RefreshMode,
        noise: NoiseModel,
    ) -> Result<Self, SimError> {
        timing.validate()?;
        noise.validate()?;
        if !mapping.is_injective() {
            return Err(SimError::InvalidMapping);
        }
        let refresh_masks: Vec<u64> = mapping
            .functions()
            .iter()
            .filter(|f| refresh.includes(f.label))
            .map(|f| f.mask.0)
            .collect();
        let groups = 1u64 << refresh_masks.len();
        let jitter = (noise.jitter_sigma > 0.0)
            .then(|| Normal::new(0.0, noise.jitter_sigma).expect("validated sigma"));
        Ok(Self {
            banks: BankTable::new(mapping.functions().len()),
            rng: ChaCha8Rng::seed_from_u64(noise.seed),
            mapping,
            timing,
            refresh,
            noise,
            jitter,
            refresh_masks,
            groups,
            ready: 0,
            last: None,
        })
    }

    pub fn mapping(&self) -> &DramAddressMapping {
        &self.mapping
    }

    pub fn timing(&self) -> &TimingConfig {
        &self.timing
    }

    pub fn refresh_mode(&self) -> &RefreshMode {
        &self.refresh
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    /// Completion time of the last access (the earliest next issue time).
    pub fn now(&self) -> u64 {
        self.ready
    }

    pub fn refresh_group_count(&self) -> u64 {
        self.groups
    }

    pub fn refresh_group(&self, addr: PhysAddr) -> u64 {
        self.refresh_masks
            .iter()
            .enumerate()
            .fold(0, |g, (i, &m)| g | ((((m & addr).count_ones() & 1) as u64) << i))
    }

    fn group_offset(&self, group: u64) -> u64 {
        self.timing.t_refi * (group + 1) / self.groups
    }

    /// Number of refreshes of `group` that started at or before `t`.
    fn epoch(&self, group: u64, t: u64) -> u64 {
        let off = self.group_offset(group);
        if t < off {
            0
        } else {
            (t - off) / self.timing.t_refi + 1
        }
    }

    /// Start of the first refresh of `group` at or after `t`.
    pub fn next_refresh(&self, group: u64, t: u64) -> u64 {
        let off = self.group_offset(group);
        if t <= off {
            off
        } else {
            off + (t - off).div_ceil(self.timing.t_refi) * self.timing.t_refi
        }
    }

    /// Cycles an access to `group` issued at `t` waits for refresh.
    pub fn refresh_wait(&self, group: u64, t: u64) -> u64 {
        let e = self.epoch(group, t);
        if e == 0 {
            return 0;
        }
        let end = self.group_offset(group) + (e - 1) * self.timing.t_refi + self.timing.t_rfc;
        end.saturating_sub(t)
    }

    fn spacing(&self, prev: &DramCoordinate, cur: &DramCoordinate) -> u64 {
        let t = &self.timing;
        if prev.channel != cur.channel || prev.subchannel != cur.subchannel {
            t.t_rdrd_dc
        } else if prev.dimm_rank >> 1 != cur.dimm_rank >> 1 {
            t.t_rdrd_dd
        } else if prev.dimm_rank != cur.dimm_rank {
            t.t_rdrd_dr
        } else if prev.bank_group != cur.bank_group {
            t.t_rdrd_dg
        } else {
            t.t_rdrd_sg
        }
    }

    fn noise_sample(&mut self) -> i64 {
        let mut n = 0i64;
        if let Some(d) = &self.jitter {
            n += d.sample(&mut self.rng).round() as i64;
        }
        if self.noise.outlier_prob > 0.0 && self.rng.random::<f64>() < self.noise.outlier_prob {
            n += self.noise.outlier_magnitude as i64;
        }
        n
    }

    /// Issues a read `gap` cycles after the previous access completed.
    /// Returns `(issue_timestamp, latency)`.
    pub fn access_sample(&mut self, addr: PhysAddr, gap: u64) -> (u64, u64) {
        let t = self.ready + gap;
        let coord = self.mapping.decode(addr);
        let key = self.mapping.bank_key(addr);
        let group = self.refresh_group(addr);
        let wait = self.refresh_wait(group, t);
        let epoch = self.epoch(group, t + wait);
        let tm = &self.timing;
        let row_penalty = match self.banks.get(key) {
            Some((row, e)) if e == epoch => {
                if row == coord.row {
                    0
                } else {
                    tm.t_rp + tm.t_rcd
                }
            }
            _ => tm.t_rcd,
        };
        let spacing = self
            .last
            .as_ref()
            .map_or(0, |prev| self.spacing(prev, &coord).saturating_sub(gap));
        let ideal = (tm.base_hit_latency + row_penalty + spacing + wait) as i64;
        let latency = (ideal + self.noise_sample()).max(1) as u64;
        self.banks.set(key, (coord.row, epoch));
        self.last = Some(coord);
        self.ready = t + latency;
        (t, latency)
    }

    /// Issues a read and returns its latency.
    pub fn access(&mut self, addr: PhysAddr, gap: u64) -> u64 {
        self.access_sample(addr, gap).1
    }

    pub fn run_trace(&mut self, trace: &[(PhysAddr, u64)]) -> LatencySeries {
        let mut s = LatencySeries::with_capacity(trace.len());
        for &(addr, gap) in trace {
            let (t, l) = self.access_sample(addr, gap);
            s.push(t, l);
        }
        s
    }

    /// Precharges every bank.
    pub fn close_all_banks(&mut self) {
        self.banks.clear();
    }

    /// Advances time without issuing an access.
    pub fn idle(&mut self, cycles: u64) {
        self.ready += cycles;
    }

    /// Checks `addr` against the mapping's address range.
    pub fn check_addr(&self, addr: PhysAddr) -> Result<(), SimError> {
        if self.mapping.addr_width() < 64 && addr >> self.mapping.addr_width() != 0 {
            Err(SimError::AddressOutOfRange(addr))
        } else {
            Ok(())
        }
    }
}
