//! Published reference mappings bundled as mapping files.

use crate::mapfile::load_mapping;
use crate::mapping::{ComponentClass, DramAddressMapping};
use crate::sim::{RefreshKind, RefreshMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Platform {
    IntelA,
    IntelBC,
    AmdA,
}

#[derive(Clone, Copy, Debug)]
pub struct ReferenceMapping {
    pub name: &'static str,
    pub platform: Platform,
    pub text: &'static str,
}

macro_rules! reference {
    ($name:literal, $platform:ident) => {
        ReferenceMapping {
            name: $name,
            platform: Platform::$platform,
            text: include_str!(concat!("../mappings/", $name, ".map")),
        }
    };
}

/// The twelve ground-truth mappings.
pub const REFERENCES: [ReferenceMapping; 12] = [
    reference!("intel-a-1ch-1dpc", IntelA),
    reference!("intel-a-1ch-2dpc", IntelA),
    reference!("intel-a-2ch-1dpc", IntelA),
    reference!("intel-a-2ch-2dpc", IntelA),
    reference!("intel-bc-1ch-1dpc", IntelBC),
    reference!("intel-bc-1ch-2dpc", IntelBC),
    reference!("intel-bc-2ch-1dpc", IntelBC),
    reference!("intel-bc-2ch-2dpc", IntelBC),
    reference!("amd-a-1ch-1dpc", AmdA),
    reference!("amd-a-1ch-2dpc", AmdA),
    reference!("amd-a-2ch-1dpc", AmdA),
    reference!("amd-a-2ch-2dpc", AmdA),
];

/// Intel-B/C single-channel, single-DIMM row with its masks as originally
/// published. Not injective: address bit 15 is covered by no mask.
pub const INTEL_BC_1CH_1DPC_RAW: ReferenceMapping = reference!("intel-bc-1ch-1dpc-raw", IntelBC);

impl ReferenceMapping {
    pub fn mapping(&self) -> DramAddressMapping {
        load_mapping(self.text).expect("bundled mapping parses")
    }

    /// Refresh behaviour of the platform: all-bank per channel and rank on
    /// Intel-A, fine-grained per channel and rank on Intel-B/C, separate
    /// commands per sub-channel, DIMM and rank on AMD-A.
    pub fn refresh_mode(&self) -> RefreshMode {
        use ComponentClass::*;
        match self.platform {
            Platform::IntelA => RefreshMode::new(RefreshKind::AllBank, vec![Channel, DimmRank]),
            Platform::IntelBC => RefreshMode::new(RefreshKind::FineGrained, vec![Channel, DimmRank]),
            Platform::AmdA => RefreshMode::new(RefreshKind::AllBank, vec![Channel, SubChannel, DimmRank]),
        }
        .expect("valid refresh mode")
    }
}

pub fn by_name(name: &str) -> Option<ReferenceMapping> {
    REFERENCES
        .iter()
        .chain(std::iter::once(&INTEL_BC_1CH_1DPC_RAW))
        .find(|r| r.name == name)
        .copied()
}
