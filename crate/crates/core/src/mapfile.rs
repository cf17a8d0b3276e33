//! Text format for address mappings.
//!
//! ```text
//! # comment
//! addr_width = 35
//! offset_bits = 6
//! dimm_rank[] = 0x0000088000
//! bank_group[] = 0x0000002a00
//! row = 0x07fffc0000
//! column = 0x0000001fc0
//! ```
//!
//! Function keys (`channel`, `subchannel`, `dimm_rank`, `bank_group`,
//! `bank_address`, `unassigned`, each optionally suffixed with `[]`) may
//! repeat; function order is file order. `addr_width` and `offset_bits`
//! default to 37 and 6.

use std::fmt::Write as _;

use thiserror::Error;

use crate::gf2::BitMask;
use crate::mapping::{AddressingFunction, ComponentClass, DramAddressMapping, MappingError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {field}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Splits `key = value` lines, dropping comments and blank lines.
/// Yields `(line_number, key, value)`.
pub(crate) fn key_values(text: &str) -> impl Iterator<Item = Result<(usize, &str, &str), ParseError>> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        Some(match line.split_once('=') {
            Some((k, v)) => Ok((i + 1, k.trim(), v.trim())),
            None => Err(ParseError::new(i + 1, line, "expected `key = value`")),
        })
    })
}

pub(crate) fn parse_mask(line: usize, field: &str, value: &str) -> Result<BitMask, ParseError> {
    value
        .parse::<BitMask>()
        .map_err(|e| ParseError::new(line, field, e.to_string()))
}

pub(crate) fn parse_num<T: std::str::FromStr>(line: usize, field: &str, value: &str) -> Result<T, ParseError> {
    value
        .parse::<T>()
        .map_err(|_| ParseError::new(line, field, format!("invalid number {value:?}")))
}

pub fn load_mapping(text: &str) -> Result<DramAddressMapping, ParseError> {
    let mut functions: Vec<(usize, AddressingFunction)> = Vec::new();
    let mut row: Option<(usize, BitMask)> = None;
    let mut col: Option<(usize, BitMask)> = None;
    let mut addr_width = (0, DramAddressMapping::DEFAULT_ADDR_WIDTH);
    let mut offset_bits = (0, DramAddressMapping::DEFAULT_OFFSET_BITS);

    for kv in key_values(text) {
        let (line, key, value) = kv?;
        let base = key.strip_suffix("[]").unwrap_or(key).trim();
        match base {
            "row" | "column" => {
                let slot = if base == "row" { &mut row } else { &mut col };
                if slot.is_some() {
                    return Err(ParseError::new(line, base, "given more than once"));
                }
                *slot = Some((line, parse_mask(line, base, value)?));
            }
            "addr_width" => addr_width = (line, parse_num(line, base, value)?),
            "offset_bits" => offset_bits = (line, parse_num(line, base, value)?),
            _ => {
                let label: ComponentClass = base
                    .parse()
                    .ok()
                    .filter(|c: &ComponentClass| c.is_function_class())
                    .ok_or_else(|| ParseError::new(line, base, "unknown key"))?;
                let mask = parse_mask(line, base, value)?;
                if mask.is_empty() {
                    return Err(ParseError::new(line, base, "function mask is zero"));
                }
                if let Some((first, _)) = functions.iter().find(|(_, f)| f.mask == mask) {
                    return Err(ParseError::new(
                        line,
                        base,
                        format!("duplicate function mask {mask} (first on line {first})"),
                    ));
                }
                functions.push((line, AddressingFunction::new(mask, label)));
            }
        }
    }

    let (row_line, row_mask) = row.ok_or_else(|| ParseError::new(0, "row", "missing"))?;
    let (col_line, col_mask) = col.ok_or_else(|| ParseError::new(0, "column", "missing"))?;
    let fn_lines: Vec<usize> = functions.iter().map(|(l, _)| *l).collect();
    let funcs: Vec<AddressingFunction> = functions.into_iter().map(|(_, f)| f).collect();

    DramAddressMapping::new(funcs.clone(), row_mask, col_mask, offset_bits.1, addr_width.1).map_err(|e| {
        let (line, field) = match &e {
            MappingError::RowColOverlap { .. } => (row_line.max(col_line), "column".to_string()),
            MappingError::BadGeometry { .. } => (addr_width.0.max(offset_bits.0), "addr_width".to_string()),
            MappingError::MaskOutOfRange { mask, .. } => {
                if *mask == row_mask {
                    (row_line, "row".to_string())
                } else if *mask == col_mask {
                    (col_line, "column".to_string())
                } else {
                    let i = funcs.iter().position(|f| f.mask == *mask).unwrap_or(0);
                    (fn_lines.get(i).copied().unwrap_or(0), funcs[i].label.to_string())
                }
            }
            _ => (0, "mapping".to_string()),
        };
        ParseError::new(line, field, e.to_string())
    })
}

pub fn store_mapping(mapping: &DramAddressMapping) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "addr_width = {}", mapping.addr_width());
    let _ = writeln!(out, "offset_bits = {}", mapping.offset_bits());
    for f in mapping.functions() {
        let _ = writeln!(out, "{}[] = {}", f.label, f.mask);
    }
    let _ = writeln!(out, "row = {}", mapping.row_mask());
    let _ = writeln!(out, "column = {}", mapping.col_mask());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const INTEL_A: &str = "\
# Intel-A 1 channel, 1 DIMM per channel
addr_width = 35
offset_bits = 6
dimm_rank[] = 0x0000088000
bank_group[] = 0x0000002A00
bank_group[] = 0x0124044000
bank_address[] = 0x0249910000
bank_address[] = 0x0492620000
row = 0x07FFFC0000   # trailing comment
column = 0x0000001FC0
";

    #[test]
    fn roundtrip() {
        let m = load_mapping(INTEL_A).unwrap();
        assert_eq!(m.functions().len(), 5);
        assert_eq!(m.row_mask(), BitMask(0x07fffc0000));
        assert_eq!(load_mapping(&store_mapping(&m)).unwrap(), m);
    }

    #[test]
    fn overlap_is_rejected() {
        let text = INTEL_A.replace("column = 0x0000001FC0", "column = 0x00000C0000");
        let e = load_mapping(&text).unwrap_err();
        assert_eq!(e.line, 10);
    }

    #[test]
    fn duplicate_is_rejected() {
        let text = INTEL_A.replace("0x0492620000", "0x0249910000");
        let e = load_mapping(&text).unwrap_err();
        assert_eq!(e.line, 8);
        assert!(e.message.contains("duplicate"));
    }

    #[test]
    fn malformed_lines() {
        assert_eq!(load_mapping("row 0x40").unwrap_err().line, 1);
        assert_eq!(load_mapping("\nbogus = 0x40").unwrap_err().line, 2);
        assert_eq!(load_mapping("bank_group[] = 12").unwrap_err().field, "bank_group");
        assert_eq!(load_mapping("column = 0x40").unwrap_err().field, "row");
    }
}
