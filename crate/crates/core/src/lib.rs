//! XOR-hash DRAM address mappings: GF(2) tooling, a timing simulator of a
//! memory controller, timing probes, and a pipeline that recovers and labels
//! a mapping from timing observations alone.

pub mod cli;
pub mod gf2;
pub mod mapfile;
pub mod mapping;
pub mod pipeline;
pub mod probe;
pub mod reference;
pub mod report;
pub mod sim;

pub use gf2::{BitMask, Echelon, Gf2System, PhysAddr};
pub use mapping::{AddressingFunction, ComponentClass, DramAddressMapping, DramCoordinate};
