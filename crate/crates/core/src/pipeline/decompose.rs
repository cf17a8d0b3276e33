//! Full pipeline and refresh-function counting.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{class_of_level, measure_base, peak_of_delta, refresh_of_delta};
use super::{
    calibrate, decide_label, function_delta, identify_row_col_bits, random_addr, recover_bank_functions,
    validate_and_repair, AtStage, PipelineConfig, PipelineError, Stage, StageError,
};
use crate::gf2::{invert, min_weight_complement, BitMask, Echelon, Gf2System};
use crate::mapping::{AddressingFunction, ComponentClass, DramAddressMapping};
use crate::probe::{
    classify_refresh_interval, measure_reference_interval, stats::wilson_interval, AccessOracle, RefreshClass,
    RefreshReference,
};

pub use super::labels::Provenance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub mask: BitMask,
    pub label: ComponentClass,
    pub provenance: Provenance,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    pub pairs_tested: usize,
    pub conflicts: usize,
    pub bit_tests: usize,
    pub spacing_measurements: usize,
    pub refresh_measurements: usize,
    pub repaired_row_bits: Vec<u32>,
    pub repaired_col_bits: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveredMapping {
    pub mapping: DramAddressMapping,
    /// Parallel to `mapping.functions()`.
    pub functions: Vec<FunctionRecord>,
    pub threshold: f64,
    pub refresh_reference: Option<f64>,
    /// Lowest confidence among the measurements behind each label.
    pub label_confidence: BTreeMap<ComponentClass, f64>,
    pub notes: Vec<String>,
    pub stats: RecoveryStats,
}

impl RecoveredMapping {
    pub fn unassigned_count(&self) -> usize {
        self.functions
            .iter()
            .filter(|f| f.label == ComponentClass::Unassigned)
            .count()
    }
}

/// Measured evidence for one address delta.
#[derive(Clone, Debug)]
struct Measured {
    delta: BitMask,
    level: Option<u8>,
    provenance: Provenance,
    confidence: f64,
    detail: Option<&'static str>,
    note: Option<String>,
}

struct Ctx<'a, O: ?Sized> {
    oracle: &'a mut O,
    mapping: &'a DramAddressMapping,
    cfg: &'a PipelineConfig,
    base: f64,
    reference: Option<f64>,
    stats: &'a mut RecoveryStats,
}

impl<O: AccessOracle + ?Sized> Ctx<'_, O> {
    fn refresh(&mut self, delta: BitMask, rng: &mut ChaCha8Rng) -> Option<RefreshClass> {
        let reference = self.reference?;
        self.stats.refresh_measurements += 1;
        refresh_of_delta(self.oracle, self.cfg, reference, delta, rng)
            .ok()
            .map(|v| v.classification)
    }

    /// Spacing peak, plus a refresh verdict when `refresh` is given or the
    /// spacing alone does not settle the class.
    fn measure(
        &mut self,
        delta: BitMask,
        refresh: Option<Option<RefreshClass>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Measured, PipelineError> {
        self.stats.spacing_measurements += 1;
        let peak = peak_of_delta(self.oracle, self.mapping, self.cfg, delta, rng).at(Stage::Consecutive)?;
        let offset = peak as f64 - self.base;
        let cfg = self.cfg;
        let decide = |r| decide_label(offset, r, &cfg.timing_hints, &cfg.refresh_scope, cfg.peak_tolerance);
        let refresh = match refresh {
            Some(r) => r,
            None => match decide(None) {
                Ok(d) if d.label != ComponentClass::Unassigned => None,
                _ => self.refresh(delta, rng),
            },
        };
        Ok(match decide(refresh) {
            Ok(d) => Measured {
                delta,
                level: d.level(),
                provenance: d.provenance,
                confidence: d.confidence,
                detail: d.detail,
                note: d.note,
            },
            Err(e) => Measured {
                delta,
                level: None,
                provenance: Provenance::Consecutive,
                confidence: 0.5,
                detail: None,
                note: Some(e.to_string()),
            },
        })
    }
}

/// Runs the full pipeline with a generator seeded from `cfg.seed`.
pub fn decompose<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    cfg: &PipelineConfig,
) -> Result<RecoveredMapping, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    decompose_with_rng(oracle, cfg, &mut rng)
}

/// Runs the stages that need no component evidence: calibration, function
/// recovery (skipped when functions are supplied), row/column
/// identification and repair. Every function is left `Unassigned`; the
/// recovered functions are a lowest-weight basis of the measured span.
pub fn recover_mapping<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RecoveredMapping, PipelineError> {
    cfg.validate().map_err(StageError::InvalidConfig).at(Stage::Config)?;
    let mut stats = RecoveryStats::default();
    let mut notes = Vec::new();

    let threshold = calibrate(oracle, cfg, rng).at(Stage::Calibrate)?;

    let span = match &cfg.supplied_functions {
        Some(f) => Gf2System::dedup(f.iter().copied()),
        None => {
            let (s, rs) = recover_bank_functions(oracle, cfg, threshold, rng).at(Stage::Recover)?;
            stats.pairs_tested = rs.pairs_tested;
            stats.conflicts = rs.conflicts;
            s
        }
    };
    let rc = identify_row_col_bits(oracle, &span, cfg, threshold, rng).at(Stage::Identify)?;
    stats.bit_tests = rc.tests.len();

    let dim = span.rank();
    let initial: Vec<BitMask> = match &cfg.supplied_functions {
        Some(f) if span.len() == dim && span.len() == f.len() => f.clone(),
        _ => min_weight_complement(span.functions(), &[], dim).unwrap_or_else(|| span.echelon().rows().collect()),
    };
    let unassigned: Vec<AddressingFunction> = initial
        .iter()
        .map(|&m| AddressingFunction::new(m, ComponentClass::Unassigned))
        .collect();
    let (m0, repairs) = validate_and_repair(unassigned, rc.row_mask, rc.col_mask, cfg.offset_bits, cfg.addr_width)
        .at(Stage::Repair)?;
    for r in &repairs {
        match r.assigned {
            ComponentClass::Row => stats.repaired_row_bits.push(r.bit),
            _ => stats.repaired_col_bits.push(r.bit),
        }
    }
    let shared = initial
        .iter()
        .enumerate()
        .filter(|(i, m)| initial.iter().enumerate().any(|(j, o)| j != *i && o.intersects(**m)))
        .count();
    if shared > 0 {
        notes.push(format!(
            "{shared} of {} functions share address bits with another function; each was tested singly",
            initial.len()
        ));
    }

    let functions = initial
        .iter()
        .map(|&mask| FunctionRecord {
            mask,
            label: ComponentClass::Unassigned,
            provenance: Provenance::Conflict,
            confidence: 1.0,
            notes: Vec::new(),
        })
        .collect();
    Ok(RecoveredMapping {
        mapping: m0,
        functions,
        threshold,
        refresh_reference: None,
        label_confidence: BTreeMap::new(),
        notes,
        stats,
    })
}

/// Runs the full pipeline:
///
/// 1. calibrate the conflict threshold;
/// 2. recover the function span (or take the supplied functions);
/// 3. identify row and column bits and repair injectivity;
/// 4. for every function, build the delta flipping only that function and
///    measure its level (channel > DIMM/rank > bank group > bank address)
///    from refresh and spacing evidence;
/// 5. reduce the deltas to a basis adapted to the levels: a delta whose XOR
///    with a subset of same-level deltas measures lower is replaced by that
///    XOR;
/// 6. take the functions dual to those deltas (inside the recovered span)
///    and pick, per level, the lowest-weight representatives modulo the
///    higher levels. Channel hints are used verbatim.
pub fn decompose_with_rng<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RecoveredMapping, PipelineError> {
    let RecoveredMapping {
        mapping: m0,
        threshold,
        mut notes,
        mut stats,
        ..
    } = recover_mapping(oracle, cfg, rng)?;
    let initial = m0.function_masks();

    let reference = match cfg.refresh_reference {
        Some(r) => Some(r),
        None => {
            let a = random_addr(rng, cfg);
            stats.refresh_measurements += 1;
            match measure_reference_interval(oracle, a, cfg.samples.refresh_samples) {
                Ok(r) => Some(r),
                Err(e) => {
                    notes.push(format!("refresh reference unavailable: {e}"));
                    None
                }
            }
        }
    };
    let base = measure_base(oracle, &m0, cfg, rng).at(Stage::Consecutive)?;
    let mut ctx = Ctx {
        oracle,
        mapping: &m0,
        cfg,
        base,
        reference,
        stats: &mut stats,
    };

    let mut queue: std::collections::VecDeque<Measured> = std::collections::VecDeque::new();
    for i in 0..initial.len() {
        let d = function_delta(&m0, i).at(Stage::Refresh)?;
        let r = ctx.refresh(d, rng);
        queue.push_back(ctx.measure(d, Some(r), rng)?);
    }

    let mut pivots: [Vec<Measured>; 4] = Default::default();
    let mut unresolved: Vec<Measured> = Vec::new();
    while let Some(m) = queue.pop_front() {
        let Some(level) = m.level else {
            unresolved.push(m);
            continue;
        };
        let same = &pivots[level as usize];
        let mut dropped = None;
        for subset in 1u32..(1 << same.len()) {
            let combo = same
                .iter()
                .enumerate()
                .filter(|(i, _)| subset >> i & 1 == 1)
                .fold(m.delta, |acc, (_, p)| acc ^ p.delta);
            let c = ctx.measure(combo, None, rng)?;
            if c.level.is_some_and(|l| l < level) {
                dropped = Some(c);
                break;
            }
        }
        match dropped {
            Some(c) => queue.push_front(c),
            None => pivots[level as usize].push(m),
        }
    }

    // Functions dual to the ordered deltas, inside the recovered span.
    let ordered: Vec<&Measured> = pivots.iter().rev().flatten().chain(unresolved.iter()).collect();
    let n = ordered.len();
    let transposed: Vec<u64> = initial
        .iter()
        .map(|f| {
            ordered
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, m)| acc | ((f.parity(m.delta.0) as u64) << i))
        })
        .collect();
    let inv = invert(&transposed).ok_or_else(|| {
        PipelineError::new(Stage::Consecutive, StageError::IrreparableSystem("level deltas are dependent".into()))
    })?;
    let dual: Vec<BitMask> = inv
        .iter()
        .map(|row| (0..n).filter(|l| row >> l & 1 == 1).fold(BitMask::EMPTY, |acc, l| acc ^ initial[l]))
        .collect();

    let mut records: Vec<FunctionRecord> = Vec::with_capacity(n);
    let mut label_confidence = BTreeMap::new();
    let mut higher: Vec<BitMask> = Vec::new();
    let mut idx = 0;
    for level in (0..4u8).rev() {
        let group = &pivots[level as usize];
        let hs: Vec<BitMask> = dual[idx..idx + group.len()].to_vec();
        idx += group.len();
        if hs.is_empty() {
            continue;
        }
        let class = class_of_level(level);
        let upper: Vec<BitMask> = higher.iter().chain(hs.iter()).copied().collect();
        let upper_span = Echelon::from_masks(upper.iter().copied());
        let mut chosen_hints: Vec<BitMask> = Vec::new();
        if class == ComponentClass::Channel {
            let mut acc = Echelon::from_masks(higher.iter().copied());
            for &h in &cfg.known_channel_functions {
                if chosen_hints.len() < hs.len() && upper_span.contains(h) && acc.insert(h) {
                    chosen_hints.push(h);
                } else if !upper_span.contains(h) {
                    notes.push(format!("channel hint {h} lies outside the measured channel span"));
                }
            }
        }
        let lower: Vec<BitMask> = higher.iter().chain(chosen_hints.iter()).copied().collect();
        let rest = min_weight_complement(&upper, &lower, hs.len() - chosen_hints.len())
            .unwrap_or_else(|| hs[chosen_hints.len()..].to_vec());
        let confidence = group.iter().map(|m| m.confidence).fold(1.0, f64::min);
        let provenance = if group.iter().any(|m| m.provenance == Provenance::Refresh) {
            Provenance::Refresh
        } else {
            Provenance::Consecutive
        };
        let mut level_notes: Vec<String> = group.iter().filter_map(|m| m.note.clone()).collect();
        if class == ComponentClass::DimmRank {
            let mut details: Vec<&str> = group.iter().filter_map(|m| m.detail).collect();
            details.sort_unstable();
            details.dedup();
            if !details.is_empty() {
                level_notes.push(format!("spacing evidence: {}", details.join(", ")));
            }
        }
        label_confidence.insert(class, confidence);
        for &h in &chosen_hints {
            records.push(FunctionRecord {
                mask: h,
                label: class,
                provenance: Provenance::Hint,
                confidence: 1.0,
                notes: Vec::new(),
            });
        }
        for &m in &rest {
            records.push(FunctionRecord {
                mask: m,
                label: class,
                provenance,
                confidence,
                notes: level_notes.clone(),
            });
        }
        higher.extend(chosen_hints);
        higher.extend(rest);
    }
    if !unresolved.is_empty() {
        let rest = min_weight_complement(&initial, &higher, unresolved.len())
            .unwrap_or_else(|| dual[idx..].to_vec());
        let level_notes: Vec<String> = unresolved.iter().filter_map(|m| m.note.clone()).collect();
        for m in rest {
            records.push(FunctionRecord {
                mask: m,
                label: ComponentClass::Unassigned,
                provenance: Provenance::Conflict,
                confidence: 0.0,
                notes: level_notes.clone(),
            });
        }
    }

    let functions: Vec<AddressingFunction> = records.iter().map(|r| AddressingFunction::new(r.mask, r.label)).collect();
    let mapping = m0.with_functions(functions).map_err(|e| StageError::IrreparableSystem(e.to_string())).at(Stage::Repair)?;
    if !mapping.is_injective() {
        return Err(PipelineError::new(
            Stage::Repair,
            StageError::IrreparableSystem("decomposed mapping is not injective".into()),
        ));
    }
    Ok(RecoveredMapping {
        mapping,
        functions: records,
        threshold,
        refresh_reference: reference,
        label_confidence,
        notes,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshCountEstimate {
    pub pairs: usize,
    pub reduced: usize,
    /// Pairs whose refresh interval could not be measured (counted as not
    /// reduced).
    pub failed: usize,
    pub fraction: f64,
    /// `round(-log2(1 - fraction))`.
    pub functions: u32,
    /// 95% Wilson interval on `fraction`.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Function counts implied by the interval ends.
    pub functions_low: u32,
    pub functions_high: u32,
}

fn count_from_fraction(p: f64, pairs: usize) -> u32 {
    if p >= 1.0 {
        (pairs.max(2) as f64).log2().ceil() as u32
    } else {
        (-(1.0 - p).log2()).round().max(0.0) as u32
    }
}

/// Estimates how many functions split refresh groups: among random pairs a
/// fraction `1 - 2^-k` straddles two groups when `k` functions do.
pub fn estimate_refresh_function_count<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RefreshCountEstimate, PipelineError> {
    let samples = cfg.samples.refresh_count_samples;
    let reference = match cfg.refresh_reference {
        Some(r) => r,
        None => {
            let a = random_addr(rng, cfg);
            measure_reference_interval(oracle, a, samples.max(cfg.samples.refresh_samples)).at(Stage::Refresh)?
        }
    };
    let pairs = cfg.samples.refresh_count_pairs;
    let (mut reduced, mut failed) = (0, 0);
    for _ in 0..pairs {
        let a = random_addr(rng, cfg);
        let b = random_addr(rng, cfg);
        match classify_refresh_interval(oracle, a, b, RefreshReference::Known(reference), samples) {
            Ok(v) if v.classification == RefreshClass::Reduced => reduced += 1,
            Ok(_) => {}
            Err(_) => failed += 1,
        }
    }
    let fraction = if pairs == 0 { 0.0 } else { reduced as f64 / pairs as f64 };
    let (ci_low, ci_high) = wilson_interval(reduced, pairs, 1.96);
    Ok(RefreshCountEstimate {
        pairs,
        reduced,
        failed,
        fraction,
        functions: count_from_fraction(fraction, pairs),
        ci_low,
        ci_high,
        functions_low: count_from_fraction(ci_low, pairs),
        functions_high: count_from_fraction(ci_high, pairs),
    })
}
