//! Function labeling from refresh-interval and consecutive-access evidence.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{constrained_delta, random_addr, PipelineConfig, StageError, TimingHints};
use crate::gf2::{solve_delta, BitMask, Gf2Error, PhysAddr};
use crate::mapping::{ComponentClass, DramAddressMapping};
use crate::probe::{
    classify_refresh_interval, measure_stream_distribution, AccessOracle, ProbeError, RefreshClass, RefreshReference,
    RefreshVerdict,
};

/// Which measurement settled a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Recovered from row-buffer conflicts; no component evidence.
    Conflict,
    Refresh,
    Consecutive,
    Hint,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Conflict => "conflict",
            Provenance::Refresh => "refresh",
            Provenance::Consecutive => "consecutive",
            Provenance::Hint => "hint",
        }
    }
}

/// Address delta flipping function `index` only.
pub fn function_delta(mapping: &DramAddressMapping, index: usize) -> Result<BitMask, Gf2Error> {
    let flip: Vec<bool> = (0..mapping.functions().len()).map(|i| i == index).collect();
    constrained_delta(mapping, &flip)
}

/// Delta flipping column bit `bit` only (every function and row bit fixed).
fn column_delta(mapping: &DramAddressMapping, bit: u32) -> Result<BitMask, Gf2Error> {
    let mut constraints: Vec<(BitMask, bool)> = mapping.functions().iter().map(|f| (f.mask, false)).collect();
    constraints.extend(mapping.row_mask().unit_masks().map(|b| (b, false)));
    constraints.extend(mapping.col_mask().unit_masks().map(|b| (b, b == BitMask::bit(bit))));
    solve_delta(&constraints)
}

/// Up to `2^3` addresses sharing `base`'s bank and row, differing in the
/// lowest column bits.
pub fn row_hit_stream(mapping: &DramAddressMapping, base: PhysAddr) -> Result<Vec<PhysAddr>, Gf2Error> {
    let deltas = mapping
        .col_mask()
        .iter_bits()
        .take(3)
        .map(|b| column_delta(mapping, b))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = vec![base];
    for d in deltas {
        let n = out.len();
        for i in 0..n {
            out.push(out[i] ^ d.0);
        }
    }
    Ok(out)
}

/// Component level: Channel 3, DimmRank 2, BankGroup 1, BankAddress 0.
pub(crate) fn level_of(class: ComponentClass) -> Option<u8> {
    match class {
        ComponentClass::Channel | ComponentClass::SubChannel => Some(3),
        ComponentClass::DimmRank => Some(2),
        ComponentClass::BankGroup => Some(1),
        ComponentClass::BankAddress => Some(0),
        _ => None,
    }
}

pub(crate) fn class_of_level(level: u8) -> ComponentClass {
    match level {
        3 => ComponentClass::Channel,
        2 => ComponentClass::DimmRank,
        1 => ComponentClass::BankGroup,
        _ => ComponentClass::BankAddress,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelDecision {
    /// `Unassigned` when the evidence cannot separate candidate classes.
    pub label: ComponentClass,
    /// `rank`, `dimm` or `dimm_or_rank` for the merged class.
    pub detail: Option<&'static str>,
    pub confidence: f64,
    pub provenance: Provenance,
    pub note: Option<String>,
}

impl LabelDecision {
    pub fn level(&self) -> Option<u8> {
        level_of(self.label)
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    class: ComponentClass,
    hint: f64,
    detail: Option<&'static str>,
}

fn candidates(h: &TimingHints) -> [Candidate; 5] {
    use ComponentClass::*;
    [
        Candidate { class: BankAddress, hint: h.sg, detail: None },
        Candidate { class: BankGroup, hint: h.dg, detail: None },
        Candidate { class: DimmRank, hint: h.dr, detail: Some("rank") },
        Candidate { class: DimmRank, hint: h.dd, detail: Some("dimm") },
        Candidate { class: Channel, hint: h.dc, detail: None },
    ]
}

fn in_scope(scope: &[ComponentClass], class: ComponentClass) -> bool {
    scope.contains(&class) || (class == ComponentClass::Channel && scope.contains(&ComponentClass::SubChannel))
}

/// Nearest candidates to `offset`: `(distance, winners)`.
fn nearest(list: &[Candidate], offset: f64) -> Option<(f64, Vec<Candidate>)> {
    let dmin = list.iter().map(|c| (c.hint - offset).abs()).min_by(f64::total_cmp)?;
    let winners = list
        .iter()
        .filter(|c| (c.hint - offset).abs() <= dmin + 1e-9)
        .copied()
        .collect();
    Some((dmin, winners))
}

enum Resolved {
    Label(ComponentClass, Option<&'static str>),
    /// Different classes share one spacing value.
    Indistinguishable(Vec<ComponentClass>),
}

fn resolve(winners: &[Candidate], offset: f64) -> Result<Resolved, StageError> {
    let first = winners[0];
    if winners.iter().all(|c| c.class == first.class) {
        let detail = if winners.len() > 1 { Some("dimm_or_rank") } else { first.detail };
        return Ok(Resolved::Label(first.class, detail));
    }
    if winners.iter().all(|c| c.hint == first.hint) {
        let mut classes: Vec<ComponentClass> = winners.iter().map(|c| c.class).collect();
        classes.dedup();
        return Ok(Resolved::Indistinguishable(classes));
    }
    Err(StageError::AmbiguousPeak { offset })
}

/// Labels one function from its stream-peak offset (peak minus the base
/// hit latency) and, when available, its refresh verdict.
///
/// The refresh verdict first restricts the candidate classes: `Reduced`
/// keeps classes at or above the lowest refresh-scope level, `Normal` drops
/// the refresh-scope classes. The nearest remaining spacing hint within
/// `tolerance` wins; several classes sharing that spacing leave the
/// function `Unassigned`. If no consistent hint is within tolerance but an
/// inconsistent one is, consecutive-access evidence wins for bank-level
/// classes and refresh evidence wins otherwise, and the conflict is noted.
pub fn decide_label(
    offset: f64,
    refresh: Option<RefreshClass>,
    hints: &TimingHints,
    scope: &[ComponentClass],
    tolerance: f64,
) -> Result<LabelDecision, StageError> {
    let all = candidates(hints);
    let scope_min = scope.iter().filter_map(|&c| level_of(c)).min().unwrap_or(3);
    let consistent = |c: &Candidate| match refresh {
        None => true,
        Some(RefreshClass::Reduced) => level_of(c.class).is_some_and(|l| l >= scope_min),
        Some(RefreshClass::Normal) => !in_scope(scope, c.class),
    };
    let restricted: Vec<Candidate> = all.iter().filter(|c| consistent(c)).copied().collect();
    let unrestricted = nearest(&all, offset).expect("nonempty");
    let margin = |d: f64| (1.0 - d / (2.0 * (tolerance + 1.0))).clamp(0.5, 1.0);

    let indistinct = |classes: Vec<ComponentClass>, prov| {
        let names: Vec<&str> = classes.iter().map(|c| c.name()).collect();
        LabelDecision {
            label: ComponentClass::Unassigned,
            detail: None,
            confidence: 0.5,
            provenance: prov,
            note: Some(format!("spacing {offset:.1} is shared by {}", names.join("/"))),
        }
    };

    if let Some((d, winners)) = nearest(&restricted, offset).filter(|(d, _)| *d <= tolerance) {
        let chosen = resolve(&winners, offset)?;
        let spacing_alone = match (resolve(&unrestricted.1, offset), &chosen) {
            (Ok(Resolved::Label(u, _)), Resolved::Label(c, _)) => u == *c,
            _ => false,
        };
        let prov = if spacing_alone || refresh.is_none() {
            Provenance::Consecutive
        } else {
            Provenance::Refresh
        };
        return Ok(match chosen {
            Resolved::Label(label, detail) => LabelDecision {
                label,
                detail,
                confidence: margin(d),
                provenance: prov,
                note: None,
            },
            Resolved::Indistinguishable(c) => indistinct(c, prov),
        });
    }

    let (du, wu) = unrestricted;
    if du <= tolerance {
        if let Resolved::Label(label, detail) = resolve(&wu, offset)? {
            let verdict = refresh.map_or("none", |r| if r == RefreshClass::Reduced { "reduced" } else { "normal" });
            if label.is_bank_level() {
                return Ok(LabelDecision {
                    label,
                    detail,
                    confidence: 0.5,
                    provenance: Provenance::Consecutive,
                    note: Some(format!("refresh verdict {verdict} disagrees with spacing {offset:.1}; spacing kept")),
                });
            }
            if let Some((_, rw)) = nearest(&restricted, offset) {
                if let Ok(Resolved::Label(rl, rd)) = resolve(&rw, offset) {
                    return Ok(LabelDecision {
                        label: rl,
                        detail: rd,
                        confidence: 0.5,
                        provenance: Provenance::Refresh,
                        note: Some(format!("spacing {offset:.1} suggests {label}; refresh verdict {verdict} kept")),
                    });
                }
            }
        }
    }
    if nearest(&all, offset).is_some_and(|(_, w)| matches!(resolve(&w, offset), Err(_))) {
        return Err(StageError::AmbiguousPeak { offset });
    }
    Ok(LabelDecision {
        label: ComponentClass::Unassigned,
        detail: None,
        confidence: 0.5,
        provenance: Provenance::Consecutive,
        note: Some(format!("spacing {offset:.1} matches no hint within {tolerance}")),
    })
}

/// Refresh-interval verdict for every `Unassigned` function: the pair
/// `(a, a ^ d)` where `d` flips only that function. Labeled functions get
/// `None`.
pub fn group_by_refresh<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    mapping: &DramAddressMapping,
    cfg: &PipelineConfig,
    reference: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Option<Result<RefreshVerdict, ProbeError>>>, StageError> {
    let mut out = Vec::with_capacity(mapping.functions().len());
    for (i, f) in mapping.functions().iter().enumerate() {
        if f.label != ComponentClass::Unassigned {
            out.push(None);
            continue;
        }
        let d = function_delta(mapping, i)?;
        out.push(Some(refresh_of_delta(oracle, cfg, reference, d, rng)));
    }
    Ok(out)
}

pub(crate) fn refresh_of_delta<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    cfg: &PipelineConfig,
    reference: f64,
    delta: BitMask,
    rng: &mut ChaCha8Rng,
) -> Result<RefreshVerdict, ProbeError> {
    let a = random_addr(rng, cfg);
    classify_refresh_interval(oracle, a, a ^ delta.0, RefreshReference::Known(reference), cfg.samples.refresh_samples)
}

/// Consecutive-access evidence for one function.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsecutiveEvidence {
    pub delta: BitMask,
    pub peak: u64,
    /// Peak minus the base hit latency.
    pub offset: f64,
    pub decision: Result<LabelDecision, StageError>,
}

/// Base hit latency: self-interleaved stream peak minus the same-bank-group
/// spacing hint.
pub(crate) fn measure_base<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    mapping: &DramAddressMapping,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, StageError> {
    let a = random_addr(rng, cfg);
    let s = row_hit_stream(mapping, a)?;
    let rounds = rounds_for(cfg, s.len());
    let dist = measure_stream_distribution(oracle, mapping, &s, &s, rounds)?;
    Ok(dist.peak as f64 - cfg.timing_hints.sg)
}

fn rounds_for(cfg: &PipelineConfig, len: usize) -> usize {
    cfg.samples.stream_samples.div_ceil(2 * len).max(1)
}

/// Stream peak for streams `A` and `A ^ delta`.
pub(crate) fn peak_of_delta<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    mapping: &DramAddressMapping,
    cfg: &PipelineConfig,
    delta: BitMask,
    rng: &mut ChaCha8Rng,
) -> Result<u64, StageError> {
    let a = random_addr(rng, cfg);
    let sa = row_hit_stream(mapping, a)?;
    let sb: Vec<PhysAddr> = sa.iter().map(|&x| x ^ delta.0).collect();
    let dist = measure_stream_distribution(oracle, mapping, &sa, &sb, rounds_for(cfg, sa.len()))?;
    Ok(dist.peak)
}

/// Labels every function by the spacing peak of two row-hit streams that
/// differ only in that function, matched against the timing hints.
/// `refresh[i]`, when present, restricts the candidates for function `i`.
pub fn classify_by_consecutive<O: AccessOracle + ?Sized>(
    oracle: &mut O,
    mapping: &DramAddressMapping,
    cfg: &PipelineConfig,
    refresh: &[Option<RefreshClass>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ConsecutiveEvidence>, StageError> {
    let base = measure_base(oracle, mapping, cfg, rng)?;
    let mut out = Vec::with_capacity(mapping.functions().len());
    for i in 0..mapping.functions().len() {
        let delta = function_delta(mapping, i)?;
        let peak = peak_of_delta(oracle, mapping, cfg, delta, rng)?;
        let offset = peak as f64 - base;
        let r = refresh.get(i).copied().flatten();
        out.push(ConsecutiveEvidence {
            delta,
            peak,
            offset,
            decision: decide_label(offset, r, &cfg.timing_hints, &cfg.refresh_scope, cfg.peak_tolerance),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ComponentClass::*;

    fn scope() -> Vec<ComponentClass> {
        vec![Channel, SubChannel, DimmRank]
    }

    fn label(offset: f64, r: Option<RefreshClass>, h: &TimingHints) -> ComponentClass {
        decide_label(offset, r, h, &scope(), 1.0).unwrap().label
    }

    #[test]
    fn default_hints() {
        let h = TimingHints::default();
        assert_eq!(label(8.0, None, &h), BankAddress);
        assert_eq!(label(7.0, None, &h), DimmRank);
        assert_eq!(label(6.0, None, &h), DimmRank);
        // Bank group and channel share a spacing: refresh separates them.
        assert_eq!(label(4.0, None, &h), Unassigned);
        assert_eq!(label(4.0, Some(RefreshClass::Normal), &h), BankGroup);
        assert_eq!(label(4.0, Some(RefreshClass::Reduced), &h), Channel);
        assert_eq!(label(5.0, Some(RefreshClass::Normal), &h), BankGroup);
        let d = decide_label(4.0, Some(RefreshClass::Reduced), &h, &scope(), 1.0).unwrap();
        assert_eq!(d.provenance, Provenance::Refresh);
    }

    #[test]
    fn merged_dimm_rank() {
        let h = TimingHints { dr: 7.0, dd: 7.0, ..Default::default() };
        let d = decide_label(7.0, Some(RefreshClass::Reduced), &h, &scope(), 1.0).unwrap();
        assert_eq!(d.label, DimmRank);
        assert_eq!(d.detail, Some("dimm_or_rank"));
    }

    #[test]
    fn all_equal_hints_leave_unassigned() {
        let h = TimingHints { sg: 6.0, dg: 6.0, dr: 6.0, dd: 6.0, dc: 6.0 };
        for r in [None, Some(RefreshClass::Normal), Some(RefreshClass::Reduced)] {
            assert_eq!(label(6.0, r, &h), Unassigned);
        }
    }

    #[test]
    fn equidistant_distinct_hints() {
        let h = TimingHints { sg: 8.0, dg: 4.0, dr: 20.0, dd: 20.0, dc: 20.0 };
        for tol in [1.0, 2.0] {
            let e = decide_label(6.0, None, &h, &scope(), tol);
            assert!(matches!(e, Err(StageError::AmbiguousPeak { .. })), "tolerance {tol}");
        }
    }

    #[test]
    fn precedence_on_disagreement() {
        let h = TimingHints { sg: 12.0, ..Default::default() };
        // Spacing says bank address but refresh says reduced: spacing wins.
        let d = decide_label(12.0, Some(RefreshClass::Reduced), &h, &scope(), 1.0).unwrap();
        assert_eq!(d.label, BankAddress);
        assert_eq!(d.provenance, Provenance::Consecutive);
        assert!(d.note.is_some());
        // Spacing says DIMM but refresh says normal: refresh wins.
        let d = decide_label(7.0, Some(RefreshClass::Normal), &h, &scope(), 1.0).unwrap();
        assert_eq!(d.label, BankGroup);
        assert_eq!(d.provenance, Provenance::Refresh);
        assert!(d.note.is_some());
    }

    #[test]
    fn refresh_restriction_within_tolerance() {
        let h = TimingHints::default();
        let d = decide_label(7.0, Some(RefreshClass::Normal), &h, &scope(), 1.0).unwrap();
        assert_eq!(d.label, BankAddress);
        assert_eq!(d.provenance, Provenance::Refresh);
    }
}
