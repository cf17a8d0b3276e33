//! JSON pipeline reports and verification against a ground-truth mapping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::gf2::{span_equal, BitMask};
use crate::mapping::{AddressingFunction, ComponentClass, DramAddressMapping, MappingError, SubsystemReport};
use crate::pipeline::{FunctionRecord, Provenance, RecoveredMapping, RecoveryStats, RefreshCountEstimate};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemSummary {
    pub functions: Vec<BitMask>,
    pub bits: BitMask,
    pub bit_count: usize,
    pub rank: usize,
    pub injective: bool,
}

impl From<&SubsystemReport> for SubsystemSummary {
    fn from(r: &SubsystemReport) -> Self {
        Self {
            functions: r.subsystem.functions().to_vec(),
            bits: r.bits,
            bit_count: r.bit_count,
            rank: r.rank,
            injective: r.injective,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub addr_width: u32,
    pub offset_bits: u32,
    pub threshold: Option<f64>,
    pub refresh_reference: Option<f64>,
    pub functions: Vec<FunctionRecord>,
    pub row_mask: BitMask,
    pub col_mask: BitMask,
    pub injective: bool,
    pub injectivity: Vec<SubsystemSummary>,
    #[serde(default)]
    pub label_confidence: BTreeMap<ComponentClass, f64>,
    #[serde(default)]
    pub refresh_count: Option<RefreshCountEstimate>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub stats: Option<RecoveryStats>,
}

impl Report {
    /// Report for a mapping without measurement context: every function is
    /// recorded with `provenance` and full confidence.
    pub fn from_mapping(command: &str, seed: u64, mapping: &DramAddressMapping, provenance: Provenance) -> Self {
        let functions = mapping
            .functions()
            .iter()
            .map(|f| FunctionRecord {
                mask: f.mask,
                label: f.label,
                provenance,
                confidence: 1.0,
                notes: Vec::new(),
            })
            .collect();
        Self::build(command, seed, mapping, functions)
    }

    pub fn from_recovered(
        command: &str,
        seed: u64,
        rec: &RecoveredMapping,
        refresh_count: Option<RefreshCountEstimate>,
    ) -> Self {
        let mut r = Self::build(command, seed, &rec.mapping, rec.functions.clone());
        r.threshold = Some(rec.threshold);
        r.refresh_reference = rec.refresh_reference;
        r.label_confidence = rec.label_confidence.clone();
        r.refresh_count = refresh_count;
        r.notes = rec.notes.clone();
        r.stats = Some(rec.stats.clone());
        r
    }

    fn build(command: &str, seed: u64, mapping: &DramAddressMapping, functions: Vec<FunctionRecord>) -> Self {
        let injectivity: Vec<SubsystemSummary> = mapping.injectivity_check().iter().map(Into::into).collect();
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            addr_width: mapping.addr_width(),
            offset_bits: mapping.offset_bits(),
            threshold: None,
            refresh_reference: None,
            functions,
            row_mask: mapping.row_mask(),
            col_mask: mapping.col_mask(),
            injective: injectivity.iter().all(|s| s.injective),
            injectivity,
            label_confidence: BTreeMap::new(),
            refresh_count: None,
            notes: Vec::new(),
            stats: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_mapping(&self) -> Result<DramAddressMapping, MappingError> {
        let functions = self
            .functions
            .iter()
            .map(|f| AddressingFunction::new(f.mask, f.label))
            .collect();
        DramAddressMapping::new(functions, self.row_mask, self.col_mask, self.offset_bits, self.addr_width)
    }

    pub fn unassigned_count(&self) -> usize {
        self.functions
            .iter()
            .filter(|f| f.label == ComponentClass::Unassigned)
            .count()
    }

    /// One line per function: `mask,label,provenance,confidence,notes`.
    pub fn functions_csv(&self) -> String {
        let mut out = String::from("mask,label,provenance,confidence,notes\n");
        for f in &self.functions {
            let notes = f.notes.join("; ").replace('"', "'");
            let _ = writeln!(out, "{},{},{},{},\"{}\"", f.mask, f.label, f.provenance.name(), f.confidence, notes);
        }
        out
    }
}

/// One verification verdict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:<12} {}", self.name, if self.pass { "PASS" } else { "FAIL" })
    }
}

fn masks(m: &DramAddressMapping, classes: &[ComponentClass]) -> Vec<BitMask> {
    classes.iter().flat_map(|&c| m.masks_of(c)).collect()
}

/// Compares a recovered mapping with the ground truth: per-class span
/// equality (channel and sub-channel merged), no unassigned functions, and
/// exact row and column masks.
pub fn verify(recovered: &DramAddressMapping, truth: &DramAddressMapping) -> Vec<Check> {
    use ComponentClass::*;
    let classes: [(&'static str, &[ComponentClass]); 5] = [
        ("channel", &[Channel, SubChannel]),
        ("dimm_rank", &[DimmRank]),
        ("bank_group", &[BankGroup]),
        ("bank_address", &[BankAddress]),
        ("unassigned", &[Unassigned]),
    ];
    let mut out: Vec<Check> = classes
        .iter()
        .map(|(name, cs)| Check {
            name,
            pass: span_equal(&masks(recovered, cs), &masks(truth, cs)),
        })
        .collect();
    out.push(Check {
        name: "row_mask",
        pass: recovered.row_mask() == truth.row_mask(),
    });
    out.push(Check {
        name: "col_mask",
        pass: recovered.col_mask() == truth.col_mask(),
    });
    out
}
