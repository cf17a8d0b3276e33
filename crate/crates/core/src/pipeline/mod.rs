//! End-to-end mapping recovery from timing observations.
//!
//! Stages: fit a hit/conflict threshold, recover the span of the
//! bank-determining functions from same-bank pairs, sort the remaining bits
//! into row and column bits, repair injectivity, then label every function
//! with refresh-interval and consecutive-access evidence.

mod config;
mod decompose;
mod labels;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use config::{load_pipeline_config, PipelineConfig, SampleSizes, TimingHints};
pub use decompose::{
    decompose, decompose_with_rng, estimate_refresh_function_count, recover_mapping, FunctionRecord, Provenance, RecoveredMapping,
    RecoveryStats, RefreshCountEstimate,
};
pub use labels::{
    classify_by_consecutive, decide_label, function_delta, group_by_refresh, row_hit_stream, ConsecutiveEvidence,
    LabelDecision,
};

use crate::gf2::{solve_delta, BitMask, Echelon, Gf2Error, Gf2System, PhysAddr};
use crate::mapping::{suggest_missing, AddressingFunction, ComponentClass, DramAddressMapping};
use crate::probe::{fit_threshold, measure_conflict, Access, AccessOracle, ProbeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Calibrate,
    Recover,
    Identify,
    Repair,
    Refresh,
    Consecutive,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Gf2(#[from] Gf2Error),
    #[error("insufficient samples: {conflicts} conflicts from {pairs} pairs (delta rank {rank})")]
    InsufficientSamples { pairs: usize, conflicts: usize, rank: usize },
    #[error("address bit {0} could not be classified as row or column")]
    UnresolvableBit(u32),
    #[error("irreparable system: {0}")]
    IrreparableSystem(String),
    #[error("peak offset {offset:.1} is equidistant from distinct hints")]
    AmbiguousPeak { offset: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage:?} stage failed: {error}")]
pub struct PipelineError {
    pub stage: Stage,
    pub error: StageError,
}

impl PipelineError {
    pub fn new(stage: Stage, error: impl Into<StageError>) -> Self {
        Self {
            stage,
            error: error.into(),
        }
    }
}

pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

/// Uniform random cache-line-aligned address inside the configured range.
pub fn random_addr(rng: &mut ChaCha8Rng, cfg: &PipelineConfig) -> PhysAddr {
    rng.random::<u64>() & cfg.address_bits().0
}

/// Fits the hit/conflict threshold. Random pairs are screened and the
/// slowest 1% (rich in same-bank conflicts) are pooled with as many
/// same-address pairs (guaranteed hits). The fit is accepted only if
/// same-address pairs land below it and at least one screened pair lands
/// above it; otherwise the screen is repeated with twice as many pairs.
pub fn calibrate<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, StageError> {
    let s = &cfg.samples;
    let mut pairs = s.calibration_pairs.max(64);
    let mut last_err = StageError::Probe(ProbeError::NoSamples);
    for _ in 0..5 {
        let mut screened: Vec<(u64, PhysAddr, PhysAddr)> = (0..pairs)
            .map(|_| {
                let a = random_addr(rng, cfg);
                let b = random_addr(rng, cfg);
                let series = oracle.time_pair(a, b, s.screen_rounds);
                let lat: Vec<u64> = series.latencies().skip(crate::probe::WARMUP_SAMPLES).collect();
                (crate::probe::stats::median(&lat).unwrap_or(0), a, b)
            })
            .collect();
        screened.sort_by(|x, y| y.0.cmp(&x.0));
        let top = (pairs / 100).max(8);
        let mut cal: Vec<(PhysAddr, PhysAddr)> = screened[..top].iter().map(|x| (x.1, x.2)).collect();
        let hits: Vec<PhysAddr> = (0..top).map(|_| random_addr(rng, cfg)).collect();
        cal.extend(hits.iter().map(|&a| (a, a)));
        match fit_threshold(oracle, &cal, s.calibration_rounds) {
            Ok(t) => {
                let hits_ok = hits.iter().take(4).all(|&a| {
                    matches!(
                        measure_conflict(oracle, a, a, t, s.conflict_rounds, cfg.min_confidence),
                        Ok(v) if v.verdict == Access::Hit
                    )
                });
                let conflict_seen = screened[..top].iter().take(4).any(|x| {
                    matches!(
                        measure_conflict(oracle, x.1, x.2, t, s.conflict_rounds, cfg.min_confidence),
                        Ok(v) if v.verdict == Access::Conflict
                    )
                });
                if hits_ok && conflict_seen {
                    return Ok(t);
                }
                last_err = StageError::Probe(ProbeError::DegenerateDistribution {
                    low: t,
                    high: t,
                    jitter: 0.0,
                });
            }
            Err(e) => last_err = e.into(),
        }
        pairs *= 2;
    }
    Err(last_err)
}

/// Counters from the function-recovery stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecoverStats {
    pub pairs_tested: usize,
    pub conflicts: usize,
    pub delta_rank: usize,
}

/// Recovers the span of the bank-determining functions. Confirmed conflict
/// pairs are same-bank pairs, so their address deltas span the common kernel
/// of all functions; the functions are recovered as the kernel of those
/// deltas. Sampling stops once `stable_conflicts` consecutive conflicts add
/// no rank.
pub fn recover_bank_functions<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    cfg: &PipelineConfig,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Gf2System, RecoverStats), StageError> {
    let s = &cfg.samples;
    let mut deltas = Echelon::new();
    let mut stats = RecoverStats::default();
    let mut stable = 0;
    while stable < s.stable_conflicts {
        if stats.pairs_tested >= s.max_recovery_pairs {
            return Err(StageError::InsufficientSamples {
                pairs: stats.pairs_tested,
                conflicts: stats.conflicts,
                rank: deltas.rank(),
            });
        }
        stats.pairs_tested += 1;
        let a = random_addr(rng, cfg);
        let b = random_addr(rng, cfg);
        if a == b {
            continue;
        }
        let quick = measure_conflict(oracle, a, b, threshold, s.screen_rounds, 0.0)?;
        if quick.verdict != Access::Conflict {
            continue;
        }
        match measure_conflict(oracle, a, b, threshold, s.conflict_rounds, cfg.min_confidence) {
            Ok(v) if v.verdict == Access::Conflict => {
                stats.conflicts += 1;
                if deltas.insert(BitMask(a ^ b)) {
                    stable = 0;
                } else {
                    stable += 1;
                }
            }
            _ => {}
        }
    }
    stats.delta_rank = deltas.rank();
    let functions = deltas.kernel_within(cfg.address_bits());
    Ok((Gf2System::new(functions)?, stats))
}

/// Outcome of one row/column candidate test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BitTest {
    pub bit: u32,
    pub delta: BitMask,
    pub verdict: Access,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowColumn {
    pub row_mask: BitMask,
    pub col_mask: BitMask,
    pub tests: Vec<BitTest>,
}

/// Sorts address bits into row and column bits. Every bit `f` that is not
/// a pivot of the function system has a same-bank delta whose highest bit
/// is `f` (the nullspace vector for `f`). Bits outside every function are
/// tested first, then the rest in ascending order. A conflict makes `f` a
/// row bit; hit deltas are column-type deltas, and the column mask is the
/// lowest set of bits on which those deltas have full rank.
pub fn identify_row_col_bits<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    functions: &Gf2System,
    cfg: &PipelineConfig,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RowColumn, StageError> {
    let universe = cfg.address_bits();
    let mut candidates = functions.echelon().kernel_within(universe);
    candidates.sort_by_key(|v| (v.count() != 1, v.highest_bit()));
    let mut row = BitMask::EMPTY;
    let mut hit_deltas: Vec<BitMask> = Vec::new();
    let mut tests = Vec::with_capacity(candidates.len());
    for v in candidates {
        let f = v.highest_bit().expect("nonzero kernel vector");
        let mut outcome = None;
        for _ in 0..3 {
            let a = random_addr(rng, cfg);
            if let Ok(verdict) = measure_conflict(oracle, a, a ^ v.0, threshold, cfg.samples.conflict_rounds, cfg.min_confidence) {
                outcome = Some(verdict);
                break;
            }
        }
        let verdict = outcome.ok_or(StageError::UnresolvableBit(f))?;
        tests.push(BitTest {
            bit: f,
            delta: v,
            verdict: verdict.verdict,
            confidence: verdict.confidence,
        });
        match verdict.verdict {
            Access::Conflict => row |= BitMask::bit(f),
            Access::Hit => hit_deltas.push(v),
        }
    }
    let proj_rank = |cols: BitMask| Echelon::from_masks(hit_deltas.iter().map(|&w| w & cols)).rank();
    let mut col = BitMask::EMPTY;
    for b in (universe & !row).iter_bits() {
        if col.count() as usize == hit_deltas.len() {
            break;
        }
        let trial = col | BitMask::bit(b);
        if proj_rank(trial) > proj_rank(col) {
            col = trial;
        }
    }
    Ok(RowColumn {
        row_mask: row,
        col_mask: col,
        tests,
    })
}

/// A bit added during repair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RepairAction {
    pub bit: u32,
    pub assigned: ComponentClass,
}

/// Row for bits above the lowest row bit, column for bits below the highest
/// column bit, otherwise whichever region is nearer (ties go to row).
fn repair_side(bit: u32, row: BitMask, col: BitMask) -> ComponentClass {
    let row_lo = row.lowest_bit();
    let col_hi = col.highest_bit();
    if row_lo.is_some_and(|r| bit > r) {
        return ComponentClass::Row;
    }
    if col_hi.is_some_and(|c| bit < c) {
        return ComponentClass::Column;
    }
    match (row_lo, col_hi) {
        (Some(r), Some(c)) if bit - c < r - bit => ComponentClass::Column,
        (None, Some(_)) => ComponentClass::Column,
        _ => ComponentClass::Row,
    }
}

/// Builds the mapping and restores injectivity: while a subsystem is
/// rank-deficient, the highest bit of each nullspace suggestion (a bit no
/// pivot covers) is added to the row or column mask by position.
pub fn validate_and_repair(
    functions: Vec<AddressingFunction>,
    row_mask: BitMask,
    col_mask: BitMask,
    offset_bits: u32,
    addr_width: u32,
) -> Result<(DramAddressMapping, Vec<RepairAction>), StageError> {
    let mut row = row_mask;
    let mut col = col_mask;
    let mut actions = Vec::new();
    loop {
        let m = DramAddressMapping::new(functions.clone(), row, col, offset_bits, addr_width)
            .map_err(|e| StageError::IrreparableSystem(e.to_string()))?;
        let bad: Vec<_> = m.injectivity_check().into_iter().filter(|r| !r.injective).collect();
        if bad.is_empty() {
            return Ok((m, actions));
        }
        let mut progressed = false;
        for report in &bad {
            let suggestions = suggest_missing(report).map_err(|e| StageError::IrreparableSystem(e.to_string()))?;
            for s in suggestions {
                let Some(bit) = s.highest_bit() else { continue };
                if (row | col).contains_bit(bit) {
                    continue;
                }
                let side = repair_side(bit, row, col);
                match side {
                    ComponentClass::Row => row |= BitMask::bit(bit),
                    _ => col |= BitMask::bit(bit),
                }
                actions.push(RepairAction { bit, assigned: side });
                progressed = true;
            }
        }
        if !progressed {
            return Err(StageError::IrreparableSystem(format!(
                "{} subsystem(s) remain rank-deficient with no usable suggestion",
                bad.len()
            )));
        }
    }
}

/// Address delta flipping exactly the functions selected by `flip`, keeping
/// every other function and every row and column bit unchanged.
pub fn constrained_delta(mapping: &DramAddressMapping, flip: &[bool]) -> Result<BitMask, Gf2Error> {
    let mut constraints: Vec<(BitMask, bool)> = mapping
        .functions()
        .iter()
        .zip(flip)
        .map(|(f, &t)| (f.mask, t))
        .collect();
    constraints.extend(mapping.row_mask().unit_masks().map(|b| (b, false)));
    constraints.extend(mapping.col_mask().unit_masks().map(|b| (b, false)));
    solve_delta(&constraints)
}
