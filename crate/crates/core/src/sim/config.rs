//! Timing, refresh and noise parameters, plus their `key = value` file form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapfile::{key_values, parse_num, ParseError};
use crate::mapping::ComponentClass;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("t_refi ({t_refi}) must exceed t_rfc ({t_rfc})")]
    RefreshTooLong { t_refi: u64, t_rfc: u64 },
    #[error("t_rdrd_dg ({dg}) must not exceed t_rdrd_sg ({sg})")]
    SpacingOrder { dg: u64, sg: u64 },
    #[error("refresh mode needs at least one group class")]
    NoRefreshClasses,
    #[error("{kind:?} refresh cannot be keyed on {class}")]
    BadRefreshClass { kind: RefreshKind, class: ComponentClass },
    #[error("outlier_prob {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("jitter_sigma {0} must be finite and non-negative")]
    BadSigma(f64),
}

/// Memory-controller timing in controller clock cycles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub clock_period_ns: f64,
    pub t_rcd: u64,
    pub t_rp: u64,
    pub t_rfc: u64,
    pub t_refi: u64,
    pub base_hit_latency: u64,
    /// Consecutive reads, same bank group.
    pub t_rdrd_sg: u64,
    /// Different bank group, same rank.
    pub t_rdrd_dg: u64,
    /// Different rank, same DIMM.
    pub t_rdrd_dr: u64,
    /// Different DIMM.
    pub t_rdrd_dd: u64,
    /// Different channel or sub-channel.
    pub t_rdrd_dc: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            clock_period_ns: 1.0 / 2.4,
            t_rcd: 16,
            t_rp: 16,
            t_rfc: 650,
            t_refi: 9360,
            base_hit_latency: 50,
            t_rdrd_sg: 8,
            t_rdrd_dg: 4,
            t_rdrd_dr: 6,
            t_rdrd_dd: 7,
            t_rdrd_dc: 4,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.clock_period_ns > 0.0) {
            return Err(ConfigError::NonPositive("clock_period_ns"));
        }
        for (name, v) in [
            ("t_rcd", self.t_rcd),
            ("t_rp", self.t_rp),
            ("t_rfc", self.t_rfc),
            ("t_refi", self.t_refi),
            ("base_hit_latency", self.base_hit_latency),
            ("t_rdrd_sg", self.t_rdrd_sg),
            ("t_rdrd_dg", self.t_rdrd_dg),
            ("t_rdrd_dr", self.t_rdrd_dr),
            ("t_rdrd_dd", self.t_rdrd_dd),
            ("t_rdrd_dc", self.t_rdrd_dc),
        ] {
            if v == 0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        if self.t_refi <= self.t_rfc {
            return Err(ConfigError::RefreshTooLong {
                t_refi: self.t_refi,
                t_rfc: self.t_rfc,
            });
        }
        if self.t_rdrd_dg > self.t_rdrd_sg {
            return Err(ConfigError::SpacingOrder {
                dg: self.t_rdrd_dg,
                sg: self.t_rdrd_sg,
            });
        }
        Ok(())
    }

    /// Every spacing set to `v` (nothing distinguishes components).
    pub fn with_uniform_spacing(mut self, v: u64) -> Self {
        self.t_rdrd_sg = v;
        self.t_rdrd_dg = v;
        self.t_rdrd_dr = v;
        self.t_rdrd_dd = v;
        self.t_rdrd_dc = v;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshKind {
    AllBank,
    FineGrained,
}

/// How refresh commands partition the address space. Refresh groups are the
/// joint values of all functions whose class is listed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshMode {
    kind: RefreshKind,
    classes: Vec<ComponentClass>,
}

impl RefreshMode {
    pub fn new(kind: RefreshKind, mut classes: Vec<ComponentClass>) -> Result<Self, ConfigError> {
        classes.sort();
        classes.dedup();
        if classes.is_empty() {
            return Err(ConfigError::NoRefreshClasses);
        }
        for &class in &classes {
            let ok = match kind {
                RefreshKind::AllBank => matches!(
                    class,
                    ComponentClass::Channel | ComponentClass::SubChannel | ComponentClass::DimmRank
                ),
                RefreshKind::FineGrained => class.is_function_class() && class != ComponentClass::Unassigned,
            };
            if !ok {
                return Err(ConfigError::BadRefreshClass { kind, class });
            }
        }
        Ok(Self { kind, classes })
    }

    pub fn kind(&self) -> RefreshKind {
        self.kind
    }

    pub fn classes(&self) -> &[ComponentClass] {
        &self.classes
    }

    pub fn includes(&self, class: ComponentClass) -> bool {
        self.classes.contains(&class)
    }
}

impl Default for RefreshMode {
    fn default() -> Self {
        Self::new(
            RefreshKind::AllBank,
            vec![ComponentClass::Channel, ComponentClass::SubChannel, ComponentClass::DimmRank],
        )
        .expect("valid")
    }
}

/// Measurement disturbance: rounded Gaussian jitter plus rare outliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub jitter_sigma: f64,
    pub outlier_prob: f64,
    pub outlier_magnitude: u64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none(seed: u64) -> Self {
        Self {
            jitter_sigma: 0.0,
            outlier_prob: 0.0,
            outlier_magnitude: 0,
            seed,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            jitter_sigma: sigma,
            ..Self::none(seed)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(ConfigError::BadProbability(self.outlier_prob));
        }
        if !self.jitter_sigma.is_finite() || self.jitter_sigma < 0.0 {
            return Err(ConfigError::BadSigma(self.jitter_sigma));
        }
        Ok(())
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::none(0)
    }
}

/// Everything a timing file can set.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SimSettings {
    pub timing: TimingConfig,
    /// `None` when the file leaves the refresh mode unspecified.
    pub refresh: Option<RefreshMode>,
    pub noise: NoiseModel,
}

fn norm_key(key: &str) -> String {
    key.chars()
        .filter(|c| *c != '_' && *c != '-')
        .flat_map(char::to_lowercase)
        .collect()
}

/// Parses a timing file. Keys are matched ignoring case and underscores, so
/// both `t_refi` and `tREFI` work. Besides the timing fields it accepts
/// `refresh_mode` (`all_bank` | `fine_grained`), `refresh_classes`
/// (comma-separated), `jitter_sigma`, `outlier_prob`, `outlier_magnitude`
/// and `seed`.
pub fn load_timing(text: &str) -> Result<SimSettings, ParseError> {
    let mut s = SimSettings::default();
    let mut kind: Option<(usize, RefreshKind)> = None;
    let mut classes: Option<(usize, Vec<ComponentClass>)> = None;
    let t = &mut s.timing;
    for kv in key_values(text) {
        let (line, key, value) = kv?;
        let k = norm_key(key);
        match k.as_str() {
            "clockperiodns" => t.clock_period_ns = parse_num(line, key, value)?,
            "trcd" => t.t_rcd = parse_num(line, key, value)?,
            "trp" => t.t_rp = parse_num(line, key, value)?,
            "trfc" => t.t_rfc = parse_num(line, key, value)?,
            "trefi" => t.t_refi = parse_num(line, key, value)?,
            "basehitlatency" => t.base_hit_latency = parse_num(line, key, value)?,
            "trdrdsg" => t.t_rdrd_sg = parse_num(line, key, value)?,
            "trdrddg" => t.t_rdrd_dg = parse_num(line, key, value)?,
            "trdrddr" => t.t_rdrd_dr = parse_num(line, key, value)?,
            "trdrddd" => t.t_rdrd_dd = parse_num(line, key, value)?,
            "trdrddc" => t.t_rdrd_dc = parse_num(line, key, value)?,
            "jittersigma" => s.noise.jitter_sigma = parse_num(line, key, value)?,
            "outlierprob" => s.noise.outlier_prob = parse_num(line, key, value)?,
            "outliermagnitude" => s.noise.outlier_magnitude = parse_num(line, key, value)?,
            "seed" => s.noise.seed = parse_num(line, key, value)?,
            "refreshmode" => {
                let k = match norm_key(value).as_str() {
                    "allbank" => RefreshKind::AllBank,
                    "finegrained" => RefreshKind::FineGrained,
                    _ => return Err(ParseError::new(line, key, format!("unknown refresh mode {value:?}"))),
                };
                kind = Some((line, k));
            }
            "refreshclasses" => {
                let list = value
                    .split(',')
                    .map(|c| c.parse::<ComponentClass>().map_err(|e| ParseError::new(line, key, e)))
                    .collect::<Result<Vec<_>, _>>()?;
                classes = Some((line, list));
            }
            _ => return Err(ParseError::new(line, key, "unknown key")),
        }
    }
    s.timing
        .validate()
        .map_err(|e| ParseError::new(0, "timing", e.to_string()))?;
    s.noise
        .validate()
        .map_err(|e| ParseError::new(0, "noise", e.to_string()))?;
    if kind.is_some() || classes.is_some() {
        let line = kind.map_or(0, |k| k.0).max(classes.as_ref().map_or(0, |c| c.0));
        let kind = kind.map_or(RefreshKind::AllBank, |k| k.1);
        let classes = classes.map_or_else(|| RefreshMode::default().classes().to_vec(), |c| c.1);
        s.refresh = Some(
            RefreshMode::new(kind, classes).map_err(|e| ParseError::new(line, "refresh_classes", e.to_string()))?,
        );
    }
    Ok(s)
}

pub fn store_timing(s: &SimSettings) -> String {
    let t = &s.timing;
    let mut out = String::new();
    let _ = writeln!(out, "clock_period_ns = {}", t.clock_period_ns);
    for (k, v) in [
        ("t_rcd", t.t_rcd),
        ("t_rp", t.t_rp),
        ("t_rfc", t.t_rfc),
        ("t_refi", t.t_refi),
        ("base_hit_latency", t.base_hit_latency),
        ("t_rdrd_sg", t.t_rdrd_sg),
        ("t_rdrd_dg", t.t_rdrd_dg),
        ("t_rdrd_dr", t.t_rdrd_dr),
        ("t_rdrd_dd", t.t_rdrd_dd),
        ("t_rdrd_dc", t.t_rdrd_dc),
    ] {
        let _ = writeln!(out, "{k} = {v}");
    }
    if let Some(r) = &s.refresh {
        let kind = match r.kind() {
            RefreshKind::AllBank => "all_bank",
            RefreshKind::FineGrained => "fine_grained",
        };
        let _ = writeln!(out, "refresh_mode = {kind}");
        let names: Vec<&str> = r.classes().iter().map(|c| c.name()).collect();
        let _ = writeln!(out, "refresh_classes = {}", names.join(","));
    }
    let _ = writeln!(out, "jitter_sigma = {}", s.noise.jitter_sigma);
    let _ = writeln!(out, "outlier_prob = {}", s.noise.outlier_prob);
    let _ = writeln!(out, "outlier_magnitude = {}", s.noise.outlier_magnitude);
    let _ = writeln!(out, "seed = {}", s.noise.seed);
    out
}
