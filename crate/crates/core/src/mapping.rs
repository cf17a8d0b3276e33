//! DRAM address mappings: labeled XOR functions plus row/column bit masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf2::{BitMask, Echelon, Gf2System, PhysAddr};

/// DRAM component a function (or bit) selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentClass {
    Channel,
    SubChannel,
    /// DIMM and rank, merged: the two are only separable when their
    /// read-to-read spacings differ.
    DimmRank,
    BankGroup,
    BankAddress,
    Row,
    Column,
    Unassigned,
}

impl ComponentClass {
    /// Classes that label XOR functions, in coordinate order.
    pub const FUNCTION_CLASSES: [ComponentClass; 6] = [
        ComponentClass::Channel,
        ComponentClass::SubChannel,
        ComponentClass::DimmRank,
        ComponentClass::BankGroup,
        ComponentClass::BankAddress,
        ComponentClass::Unassigned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentClass::Channel => "channel",
            ComponentClass::SubChannel => "subchannel",
            ComponentClass::DimmRank => "dimm_rank",
            ComponentClass::BankGroup => "bank_group",
            ComponentClass::BankAddress => "bank_address",
            ComponentClass::Row => "row",
            ComponentClass::Column => "column",
            ComponentClass::Unassigned => "unassigned",
        }
    }

    pub fn is_function_class(self) -> bool {
        !matches!(self, ComponentClass::Row | ComponentClass::Column)
    }

    /// Bank group and bank address (the within-rank classes).
    pub fn is_bank_level(self) -> bool {
        matches!(self, ComponentClass::BankGroup | ComponentClass::BankAddress)
    }

    fn slot(self) -> usize {
        match self {
            ComponentClass::Channel => 0,
            ComponentClass::SubChannel => 1,
            ComponentClass::DimmRank => 2,
            ComponentClass::BankGroup => 3,
            ComponentClass::BankAddress => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for ComponentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        Ok(match norm.as_str() {
            "channel" => ComponentClass::Channel,
            "subchannel" => ComponentClass::SubChannel,
            "dimmrank" => ComponentClass::DimmRank,
            "bankgroup" => ComponentClass::BankGroup,
            "bankaddress" | "bank" => ComponentClass::BankAddress,
            "row" => ComponentClass::Row,
            "column" | "col" => ComponentClass::Column,
            "unassigned" => ComponentClass::Unassigned,
            _ => return Err(format!("unknown component class {s:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AddressingFunction {
    pub mask: BitMask,
    pub label: ComponentClass,
}

impl AddressingFunction {
    pub fn new(mask: BitMask, label: ComponentClass) -> Self {
        Self { mask, label }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MappingError {
    #[error("function mask is zero")]
    EmptyFunction,
    #[error("duplicate function mask {0}")]
    DuplicateFunction(BitMask),
    #[error("function {0} cannot carry label {1}")]
    BadLabel(BitMask, ComponentClass),
    #[error("row mask {row} and column mask {col} overlap")]
    RowColOverlap { row: BitMask, col: BitMask },
    #[error("mask {mask} sets bits outside [{offset_bits}, {addr_width})")]
    MaskOutOfRange {
        mask: BitMask,
        offset_bits: u32,
        addr_width: u32,
    },
    #[error("invalid address geometry: offset_bits {offset_bits}, addr_width {addr_width}")]
    BadGeometry { offset_bits: u32, addr_width: u32 },
    #[error("subsystem is already injective")]
    AlreadyInjective,
}

/// Decoded DRAM location. Class indices hold one bit per function of that
/// class, in function-list order (first function = bit 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct DramCoordinate {
    pub channel: u32,
    pub subchannel: u32,
    pub dimm_rank: u32,
    pub bank_group: u32,
    pub bank_address: u32,
    /// Functions without a component label.
    pub unassigned: u32,
    pub row: u64,
    pub column: u64,
}

impl DramCoordinate {
    /// Index of `class` (row and column as extracted values).
    pub fn index_of(&self, class: ComponentClass) -> u64 {
        match class {
            ComponentClass::Channel => self.channel as u64,
            ComponentClass::SubChannel => self.subchannel as u64,
            ComponentClass::DimmRank => self.dimm_rank as u64,
            ComponentClass::BankGroup => self.bank_group as u64,
            ComponentClass::BankAddress => self.bank_address as u64,
            ComponentClass::Unassigned => self.unassigned as u64,
            ComponentClass::Row => self.row,
            ComponentClass::Column => self.column,
        }
    }
}

/// Rank-vs-bit-count verdict for one disjoint subsystem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubsystemReport {
    pub subsystem: Gf2System,
    /// Address bits this subsystem covers. Equals the subsystem's bit
    /// universe, except for the report on unmapped bits, whose subsystem is
    /// empty.
    pub bits: BitMask,
    pub bit_count: usize,
    pub rank: usize,
    pub injective: bool,
}

/// Collects the bits of `addr` selected by `mask` into the low bits of the
/// result, ascending.
#[inline]
pub fn extract_bits(addr: PhysAddr, mask: BitMask) -> u64 {
    let mut out = 0u64;
    let mut m = mask.0;
    let mut i = 0;
    while m != 0 {
        let b = m & m.wrapping_neg();
        if addr & b != 0 {
            out |= 1 << i;
        }
        i += 1;
        m &= m - 1;
    }
    out
}

/// Inverse of [`extract_bits`].
#[inline]
pub fn deposit_bits(value: u64, mask: BitMask) -> PhysAddr {
    let mut out = 0u64;
    let mut m = mask.0;
    let mut i = 0;
    while m != 0 {
        let b = m & m.wrapping_neg();
        if (value >> i) & 1 == 1 {
            out |= b;
        }
        i += 1;
        m &= m - 1;
    }
    out
}

/// Immutable, validated address mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DramAddressMapping {
    functions: Vec<AddressingFunction>,
    row_mask: BitMask,
    col_mask: BitMask,
    offset_bits: u32,
    addr_width: u32,
}

impl DramAddressMapping {
    pub const DEFAULT_ADDR_WIDTH: u32 = 37;
    pub const DEFAULT_OFFSET_BITS: u32 = 6;

    /// Checks the structural invariants (nonzero, duplicate-free function
    /// masks; disjoint row/column masks; every mask inside the address
    /// range). Injectivity is not required here; see
    /// [`DramAddressMapping::injectivity_check`].
    pub fn new(
        functions: Vec<AddressingFunction>,
        row_mask: BitMask,
        col_mask: BitMask,
        offset_bits: u32,
        addr_width: u32,
    ) -> Result<Self, MappingError> {
        if addr_width > 64 || offset_bits >= addr_width {
            return Err(MappingError::BadGeometry {
                offset_bits,
                addr_width,
            });
        }
        let range = BitMask::range(offset_bits, addr_width);
        let in_range = |mask: BitMask| {
            if mask & !range == BitMask::EMPTY {
                Ok(())
            } else {
                Err(MappingError::MaskOutOfRange {
                    mask,
                    offset_bits,
                    addr_width,
                })
            }
        };
        let mut seen = std::collections::HashSet::new();
        for f in &functions {
            if f.mask.is_empty() {
                return Err(MappingError::EmptyFunction);
            }
            if !f.label.is_function_class() {
                return Err(MappingError::BadLabel(f.mask, f.label));
            }
            if !seen.insert(f.mask) {
                return Err(MappingError::DuplicateFunction(f.mask));
            }
            in_range(f.mask)?;
        }
        if row_mask.intersects(col_mask) {
            return Err(MappingError::RowColOverlap {
                row: row_mask,
                col: col_mask,
            });
        }
        in_range(row_mask)?;
        in_range(col_mask)?;
        Ok(Self {
            functions,
            row_mask,
            col_mask,
            offset_bits,
            addr_width,
        })
    }

    pub fn functions(&self) -> &[AddressingFunction] {
        &self.functions
    }

    pub fn row_mask(&self) -> BitMask {
        self.row_mask
    }

    pub fn col_mask(&self) -> BitMask {
        self.col_mask
    }

    pub fn offset_bits(&self) -> u32 {
        self.offset_bits
    }

    pub fn addr_width(&self) -> u32 {
        self.addr_width
    }

    /// Address bits that may take part in the mapping: `[offset_bits, addr_width)`.
    pub fn address_bits(&self) -> BitMask {
        BitMask::range(self.offset_bits, self.addr_width)
    }

    /// Masks of all functions carrying `class`, in list order.
    pub fn masks_of(&self, class: ComponentClass) -> Vec<BitMask> {
        self.functions
            .iter()
            .filter(|f| f.label == class)
            .map(|f| f.mask)
            .collect()
    }

    /// All function masks in list order.
    pub fn function_masks(&self) -> Vec<BitMask> {
        self.functions.iter().map(|f| f.mask).collect()
    }

    /// Copy with the function list replaced (re-validated).
    pub fn with_functions(&self, functions: Vec<AddressingFunction>) -> Result<Self, MappingError> {
        Self::new(
            functions,
            self.row_mask,
            self.col_mask,
            self.offset_bits,
            self.addr_width,
        )
    }

    pub fn decode(&self, addr: PhysAddr) -> DramCoordinate {
        let mut idx = [0u32; 6];
        let mut pos = [0u32; 6];
        for f in &self.functions {
            let s = f.label.slot();
            if f.mask.parity(addr) {
                idx[s] |= 1 << pos[s];
            }
            pos[s] += 1;
        }
        DramCoordinate {
            channel: idx[0],
            subchannel: idx[1],
            dimm_rank: idx[2],
            bank_group: idx[3],
            bank_address: idx[4],
            unassigned: idx[5],
            row: extract_bits(addr, self.row_mask),
            column: extract_bits(addr, self.col_mask),
        }
    }

    /// Parities of all functions packed into a word (bit i = function i).
    pub fn bank_key(&self, addr: PhysAddr) -> u64 {
        self.functions
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, f)| acc | ((f.mask.parity(addr) as u64) << i))
    }

    /// True iff `a` and `b` agree on every function of `class` (or on the
    /// row/column index for those classes).
    pub fn same_component(&self, a: PhysAddr, b: PhysAddr, class: ComponentClass) -> bool {
        match class {
            ComponentClass::Row => extract_bits(a ^ b, self.row_mask) == 0,
            ComponentClass::Column => extract_bits(a ^ b, self.col_mask) == 0,
            c => self
                .functions
                .iter()
                .filter(|f| f.label == c)
                .all(|f| !f.mask.parity(a ^ b)),
        }
    }

    /// True iff every function (whatever its label) agrees on `a` and `b`.
    pub fn same_bank(&self, a: PhysAddr, b: PhysAddr) -> bool {
        self.functions.iter().all(|f| !f.mask.parity(a ^ b))
    }

    /// All function masks plus one single-bit mask per row and column bit.
    /// Masks that coincide are kept once.
    pub fn full_system(&self) -> Gf2System {
        Gf2System::dedup(
            self.functions
                .iter()
                .map(|f| f.mask)
                .chain(self.row_mask.unit_masks())
                .chain(self.col_mask.unit_masks()),
        )
    }

    /// Partitions the full system into disjoint subsystems and compares rank
    /// with bit count in each. Address bits that no mask touches are
    /// reported as one extra subsystem with rank 0.
    pub fn injectivity_check(&self) -> Vec<SubsystemReport> {
        let full = self.full_system();
        let mut reports: Vec<SubsystemReport> = full
            .disjoint_partition()
            .into_iter()
            .map(|s| {
                let bits = s.bit_universe();
                let rank = s.rank();
                let bit_count = bits.count() as usize;
                SubsystemReport {
                    subsystem: s,
                    bits,
                    bit_count,
                    rank,
                    injective: rank == bit_count,
                }
            })
            .collect();
        let unmapped = self.address_bits() & !full.bit_universe();
        if !unmapped.is_empty() {
            reports.push(SubsystemReport {
                subsystem: Gf2System::default(),
                bits: unmapped,
                bit_count: unmapped.count() as usize,
                rank: 0,
                injective: false,
            });
        }
        reports
    }

    pub fn is_injective(&self) -> bool {
        self.injectivity_check().iter().all(|r| r.injective)
    }

    /// A delta `d != 0` with `decode(a) == decode(a ^ d)` for all `a`, if
    /// the mapping is not injective.
    pub fn collision_delta(&self) -> Option<BitMask> {
        self.injectivity_check()
            .iter()
            .filter(|r| !r.injective)
            .find_map(|r| suggest_missing(r).ok()?.into_iter().next())
    }
}

/// Nullspace basis of a non-injective subsystem: address deltas invisible to
/// every mask in it. The highest bit of each suggestion is distinct and
/// uncovered by the subsystem's pivots, so adding those bits as row or
/// column bits restores full rank.
pub fn suggest_missing(report: &SubsystemReport) -> Result<Vec<BitMask>, MappingError> {
    if report.injective {
        return Err(MappingError::AlreadyInjective);
    }
    Ok(report.subsystem.echelon().kernel_within(report.bits))
}

/// Equality of the per-class function spans of two mappings.
pub fn class_span_equal(a: &DramAddressMapping, b: &DramAddressMapping, class: ComponentClass) -> bool {
    crate::gf2::span_equal(&a.masks_of(class), &b.masks_of(class))
}

/// Rank of the union of several mask lists.
pub fn joint_rank<'a>(lists: impl IntoIterator<Item = &'a [BitMask]>) -> usize {
    let mut e = Echelon::new();
    for l in lists {
        for &m in l {
            e.insert(m);
        }
    }
    e.rank()
}
