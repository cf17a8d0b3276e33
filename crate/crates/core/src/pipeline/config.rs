use std::fmt::Write as _;

use serde::Serialize;

use crate::gf2::BitMask;
use crate::mapfile::{key_values, parse_mask, parse_num, ParseError};
use crate::mapping::{ComponentClass, DramAddressMapping};
use crate::sim::TimingConfig;

/// Expected read-to-read spacings (cycles) that stream peaks are matched
/// against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingHints {
    pub sg: f64,
    pub dg: f64,
    pub dr: f64,
    pub dd: f64,
    pub dc: f64,
}

impl From<&TimingConfig> for TimingHints {
    fn from(t: &TimingConfig) -> Self {
        Self {
            sg: t.t_rdrd_sg as f64,
            dg: t.t_rdrd_dg as f64,
            dr: t.t_rdrd_dr as f64,
            dd: t.t_rdrd_dd as f64,
            dc: t.t_rdrd_dc as f64,
        }
    }
}

impl Default for TimingHints {
    fn default() -> Self {
        (&TimingConfig::default()).into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SampleSizes {
    /// Rounds per confirming conflict vote.
    pub conflict_rounds: usize,
    /// Rounds per screening vote during calibration and recovery.
    pub screen_rounds: usize,
    /// Random pairs screened for calibration.
    pub calibration_pairs: usize,
    /// Rounds per calibration pair.
    pub calibration_rounds: usize,
    /// Samples per refresh-interval classification.
    pub refresh_samples: usize,
    /// Samples per stream-distribution measurement.
    pub stream_samples: usize,
    /// Consecutive rank-neutral conflicts that end function recovery.
    pub stable_conflicts: usize,
    /// Upper bound on pairs tried during function recovery.
    pub max_recovery_pairs: usize,
    /// Random pairs for the refresh-function count estimate (0 disables it).
    pub refresh_count_pairs: usize,
    /// Samples per pair for the refresh-function count estimate.
    pub refresh_count_samples: usize,
}

impl Default for SampleSizes {
    fn default() -> Self {
        Self {
            conflict_rounds: 32,
            screen_rounds: 4,
            calibration_pairs: 2048,
            calibration_rounds: 16,
            refresh_samples: 5000,
            stream_samples: 10_000,
            stable_conflicts: 24,
            max_recovery_pairs: 400_000,
            refresh_count_pairs: 500,
            refresh_count_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub addr_width: u32,
    pub offset_bits: u32,
    /// Channel functions known in advance (for example from controller
    /// registers); used verbatim as the channel class.
    pub known_channel_functions: Vec<BitMask>,
    pub timing_hints: TimingHints,
    /// Classes whose functions are expected to split refresh groups.
    pub refresh_scope: Vec<ComponentClass>,
    pub samples: SampleSizes,
    /// Largest peak-to-hint distance (cycles) accepted as a match.
    pub peak_tolerance: f64,
    pub min_confidence: f64,
    pub seed: u64,
    /// Skip recovery and decompose these functions instead.
    pub supplied_functions: Option<Vec<BitMask>>,
    /// Known refresh interval; measured from a self pair when absent.
    pub refresh_reference: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            addr_width: DramAddressMapping::DEFAULT_ADDR_WIDTH,
            offset_bits: DramAddressMapping::DEFAULT_OFFSET_BITS,
            known_channel_functions: Vec::new(),
            timing_hints: TimingHints::default(),
            refresh_scope: vec![ComponentClass::Channel, ComponentClass::SubChannel, ComponentClass::DimmRank],
            samples: SampleSizes::default(),
            peak_tolerance: 1.0,
            min_confidence: crate::probe::DEFAULT_MIN_CONFIDENCE,
            seed: 0,
            supplied_functions: None,
            refresh_reference: None,
        }
    }
}

impl PipelineConfig {
    /// Default configuration with the address geometry of `mapping`.
    pub fn for_mapping(mapping: &DramAddressMapping) -> Self {
        Self {
            addr_width: mapping.addr_width(),
            offset_bits: mapping.offset_bits(),
            ..Self::default()
        }
    }

    pub fn address_bits(&self) -> BitMask {
        BitMask::range(self.offset_bits, self.addr_width)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.addr_width > 64 || self.offset_bits >= self.addr_width {
            return Err(format!(
                "offset_bits {} / addr_width {} is not a valid range",
                self.offset_bits, self.addr_width
            ));
        }
        let range = self.address_bits();
        let lists = [
            ("channel hint", self.known_channel_functions.as_slice()),
            ("supplied function", self.supplied_functions.as_deref().unwrap_or(&[])),
        ];
        for (what, list) in lists {
            for &m in list {
                if m.is_empty() || m & !range != BitMask::EMPTY {
                    return Err(format!("{what} {m} is empty or outside the address range"));
                }
            }
        }
        if self.refresh_scope.is_empty() {
            return Err("refresh_scope is empty".into());
        }
        if !(self.peak_tolerance >= 0.0) {
            return Err("peak_tolerance must be non-negative".into());
        }
        if !(0.5..=1.0).contains(&self.min_confidence) {
            return Err("min_confidence must be in [0.5, 1]".into());
        }
        let s = &self.samples;
        if s.conflict_rounds < 2 || s.screen_rounds < 2 || s.refresh_samples < 100 || s.stream_samples < 100 {
            return Err("sample sizes too small".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "addr_width = {}", self.addr_width);
        let _ = writeln!(out, "offset_bits = {}", self.offset_bits);
        let _ = writeln!(out, "seed = {}", self.seed);
        for m in &self.known_channel_functions {
            let _ = writeln!(out, "channel_hint[] = {m}");
        }
        for m in self.supplied_functions.iter().flatten() {
            let _ = writeln!(out, "function[] = {m}");
        }
        let h = &self.timing_hints;
        for (k, v) in [("hint_sg", h.sg), ("hint_dg", h.dg), ("hint_dr", h.dr), ("hint_dd", h.dd), ("hint_dc", h.dc)] {
            let _ = writeln!(out, "{k} = {v}");
        }
        let scope: Vec<&str> = self.refresh_scope.iter().map(|c| c.name()).collect();
        let _ = writeln!(out, "refresh_scope = {}", scope.join(","));
        let _ = writeln!(out, "peak_tolerance = {}", self.peak_tolerance);
        let _ = writeln!(out, "min_confidence = {}", self.min_confidence);
        if let Some(r) = self.refresh_reference {
            let _ = writeln!(out, "refresh_reference = {r}");
        }
        let s = &self.samples;
        for (k, v) in [
            ("conflict_rounds", s.conflict_rounds),
            ("screen_rounds", s.screen_rounds),
            ("calibration_pairs", s.calibration_pairs),
            ("calibration_rounds", s.calibration_rounds),
            ("refresh_samples", s.refresh_samples),
            ("stream_samples", s.stream_samples),
            ("stable_conflicts", s.stable_conflicts),
            ("max_recovery_pairs", s.max_recovery_pairs),
            ("refresh_count_pairs", s.refresh_count_pairs),
            ("refresh_count_samples", s.refresh_count_samples),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parses a pipeline configuration file (`key = value`, the keys written by
/// [`PipelineConfig::to_text`]); unspecified keys keep their defaults.
pub fn load_pipeline_config(text: &str) -> Result<PipelineConfig, ParseError> {
    let mut c = PipelineConfig::default();
    let mut supplied: Vec<BitMask> = Vec::new();
    for kv in key_values(text) {
        let (line, key, value) = kv?;
        let k = key.strip_suffix("[]").unwrap_or(key).trim();
        let s = &mut c.samples;
        match k {
            "addr_width" => c.addr_width = parse_num(line, k, value)?,
            "offset_bits" => c.offset_bits = parse_num(line, k, value)?,
            "seed" => c.seed = parse_num(line, k, value)?,
            "channel_hint" => c.known_channel_functions.push(parse_mask(line, k, value)?),
            "function" => supplied.push(parse_mask(line, k, value)?),
            "hint_sg" => c.timing_hints.sg = parse_num(line, k, value)?,
            "hint_dg" => c.timing_hints.dg = parse_num(line, k, value)?,
            "hint_dr" => c.timing_hints.dr = parse_num(line, k, value)?,
            "hint_dd" => c.timing_hints.dd = parse_num(line, k, value)?,
            "hint_dc" => c.timing_hints.dc = parse_num(line, k, value)?,
            "refresh_scope" => {
                c.refresh_scope = value
                    .split(',')
                    .map(|x| x.parse::<ComponentClass>().map_err(|e| ParseError::new(line, k, e)))
                    .collect::<Result<_, _>>()?
            }
            "peak_tolerance" => c.peak_tolerance = parse_num(line, k, value)?,
            "min_confidence" => c.min_confidence = parse_num(line, k, value)?,
            "refresh_reference" => c.refresh_reference = Some(parse_num(line, k, value)?),
            "conflict_rounds" => s.conflict_rounds = parse_num(line, k, value)?,
            "screen_rounds" => s.screen_rounds = parse_num(line, k, value)?,
            "calibration_pairs" => s.calibration_pairs = parse_num(line, k, value)?,
            "calibration_rounds" => s.calibration_rounds = parse_num(line, k, value)?,
            "refresh_samples" => s.refresh_samples = parse_num(line, k, value)?,
            "stream_samples" => s.stream_samples = parse_num(line, k, value)?,
            "stable_conflicts" => s.stable_conflicts = parse_num(line, k, value)?,
            "max_recovery_pairs" => s.max_recovery_pairs = parse_num(line, k, value)?,
            "refresh_count_pairs" => s.refresh_count_pairs = parse_num(line, k, value)?,
            "refresh_count_samples" => s.refresh_count_samples = parse_num(line, k, value)?,
            _ => return Err(ParseError::new(line, k, "unknown key")),
        }
    }
    if !supplied.is_empty() {
        c.supplied_functions = Some(supplied);
    }
    c.validate().map_err(|e| ParseError::new(0, "config", e))?;
    Ok(c)
}
