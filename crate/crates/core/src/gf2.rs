//! GF(2) linear algebra over physical-address bitmasks.
//!
//! Every XOR hash function of a DRAM address mapping is a [`BitMask`]: bit `i`
//! set means physical address bit `i` takes part in the XOR. A set of such
//! masks is a binary matrix, and everything the reverse-engineering pipeline
//! needs (rank, kernel, constrained address deltas, span comparison) is plain
//! Gaussian elimination over packed 64-bit words.
//!
//! Elimination always pivots on the lowest set bit of a row and keeps the
//! basis fully reduced, so every canonical form produced here is reproducible.

use std::fmt;
use std::ops::{BitAnd, BitAndAssign, BitOr, BitOrAssign, BitXor, BitXorAssign, Not};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// A physical address.
pub type PhysAddr = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Gf2Error {
    #[error("duplicate function mask {0}")]
    DuplicateMask(BitMask),
    #[error("constraint system is inconsistent")]
    InconsistentConstraints,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid mask literal {0:?}: expected 0x-prefixed hex")]
pub struct MaskParseError(pub String);

/// One XOR hash function over physical address bits.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitMask(pub u64);

impl BitMask {
    pub const EMPTY: BitMask = BitMask(0);

    /// Mask with only `bit` set.
    pub const fn bit(bit: u32) -> Self {
        BitMask(1u64 << bit)
    }

    /// Mask with bits `lo..hi` set.
    pub fn range(lo: u32, hi: u32) -> Self {
        if hi <= lo {
            return BitMask::EMPTY;
        }
        let upper = if hi >= 64 { u64::MAX } else { (1u64 << hi) - 1 };
        let lower = (1u64 << lo) - 1;
        BitMask(upper & !lower)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub const fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub const fn contains_bit(self, bit: u32) -> bool {
        bit < 64 && (self.0 >> bit) & 1 == 1
    }

    pub const fn intersects(self, other: BitMask) -> bool {
        self.0 & other.0 != 0
    }

    pub fn lowest_bit(self) -> Option<u32> {
        (self.0 != 0).then(|| self.0.trailing_zeros())
    }

    pub fn highest_bit(self) -> Option<u32> {
        (self.0 != 0).then(|| 63 - self.0.leading_zeros())
    }

    /// Set bit positions in ascending order.
    pub fn iter_bits(self) -> impl Iterator<Item = u32> {
        let mut rest = self.0;
        std::iter::from_fn(move || {
            if rest == 0 {
                None
            } else {
                let b = rest.trailing_zeros();
                rest &= rest - 1;
                Some(b)
            }
        })
    }

    /// Single-bit masks for every set bit, ascending.
    pub fn unit_masks(self) -> impl Iterator<Item = BitMask> {
        self.iter_bits().map(BitMask::bit)
    }

    /// Parity of `self AND addr`.
    #[inline]
    pub const fn parity(self, addr: PhysAddr) -> bool {
        (self.0 & addr).count_ones() & 1 == 1
    }
}

impl fmt::Display for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:010x}", self.0)
    }
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::LowerHex for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

impl FromStr for BitMask {
    type Err = MaskParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t
            .strip_prefix("0x")
            .or_else(|| t.strip_prefix("0X"))
            .ok_or_else(|| MaskParseError(s.to_string()))?;
        if digits.is_empty() {
            return Err(MaskParseError(s.to_string()));
        }
        u64::from_str_radix(digits, 16)
            .map(BitMask)
            .map_err(|_| MaskParseError(s.to_string()))
    }
}

impl Serialize for BitMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BitMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl From<u64> for BitMask {
    fn from(v: u64) -> Self {
        BitMask(v)
    }
}

macro_rules! bit_op {
    ($tr:ident, $m:ident, $atr:ident, $am:ident, $op:tt) => {
        impl $tr for BitMask {
            type Output = BitMask;
            fn $m(self, rhs: BitMask) -> BitMask {
                BitMask(self.0 $op rhs.0)
            }
        }
        impl $atr for BitMask {
            fn $am(&mut self, rhs: BitMask) {
                self.0 = self.0 $op rhs.0;
            }
        }
    };
}

bit_op!(BitOr, bitor, BitOrAssign, bitor_assign, |);
bit_op!(BitAnd, bitand, BitAndAssign, bitand_assign, &);
bit_op!(BitXor, bitxor, BitXorAssign, bitxor_assign, ^);

impl Not for BitMask {
    type Output = BitMask;
    fn not(self) -> BitMask {
        BitMask(!self.0)
    }
}

/// Parity of `mask AND addr`.
#[inline]
pub fn parity(mask: BitMask, addr: PhysAddr) -> bool {
    mask.parity(addr)
}

/// Fully reduced row-echelon basis, pivoting on the lowest set bit.
///
/// Each row's pivot bit appears in no other row, so reduction is a single
/// pass and the basis of a given span is unique.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Echelon {
    rows: Vec<u64>,
}

impl Echelon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_masks<I: IntoIterator<Item = BitMask>>(masks: I) -> Self {
        let mut e = Self::new();
        for m in masks {
            e.insert(m);
        }
        e
    }

    pub fn rank(&self) -> usize {
        self.rows.len()
    }

    /// Reduces `v` against the basis; zero iff `v` is in the span.
    pub fn reduce(&self, v: BitMask) -> BitMask {
        let mut v = v.0;
        for &row in &self.rows {
            if v & (row & row.wrapping_neg()) != 0 {
                v ^= row;
            }
        }
        BitMask(v)
    }

    pub fn contains(&self, v: BitMask) -> bool {
        self.reduce(v).is_empty()
    }

    /// Adds `v` to the span. Returns false when it was already dependent.
    pub fn insert(&mut self, v: BitMask) -> bool {
        let r = self.reduce(v).0;
        if r == 0 {
            return false;
        }
        let pivot = r & r.wrapping_neg();
        for row in &mut self.rows {
            if *row & pivot != 0 {
                *row ^= r;
            }
        }
        let at = self
            .rows
            .partition_point(|&row| (row & row.wrapping_neg()) < pivot);
        self.rows.insert(at, r);
        true
    }

    /// Basis rows ordered by pivot.
    pub fn rows(&self) -> impl Iterator<Item = BitMask> + '_ {
        self.rows.iter().map(|&r| BitMask(r))
    }

    /// OR of all pivot bits.
    pub fn pivots(&self) -> BitMask {
        BitMask(self.rows.iter().fold(0, |acc, &r| acc | (r & r.wrapping_neg())))
    }

    /// Basis of `{d within universe : parity(row, d) = 0 for every row}`.
    ///
    /// Rows are first restricted to `universe`. One basis vector per free
    /// (non-pivot) bit `f`: `f` plus the pivots of the rows containing `f`.
    /// Since pivots are lowest bits, `f` is always the highest bit of its
    /// vector.
    pub fn kernel_within(&self, universe: BitMask) -> Vec<BitMask> {
        let restricted = Echelon::from_masks(self.rows().map(|r| r & universe));
        let pivots = restricted.pivots();
        (universe & !pivots)
            .iter_bits()
            .map(|f| {
                let mut v = 1u64 << f;
                for &row in &restricted.rows {
                    if (row >> f) & 1 == 1 {
                        v |= row & row.wrapping_neg();
                    }
                }
                BitMask(v)
            })
            .collect()
    }
}

/// Ordered, duplicate-free list of function masks (rows of a binary matrix).
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize)]
pub struct Gf2System {
    functions: Vec<BitMask>,
    bit_universe: BitMask,
}

impl Gf2System {
    pub fn new(functions: Vec<BitMask>) -> Result<Self, Gf2Error> {
        let mut seen = std::collections::HashSet::with_capacity(functions.len());
        for &f in &functions {
            if !seen.insert(f) {
                return Err(Gf2Error::DuplicateMask(f));
            }
        }
        let bit_universe = functions.iter().fold(BitMask::EMPTY, |acc, &f| acc | f);
        Ok(Self {
            functions,
            bit_universe,
        })
    }

    /// Like [`Gf2System::new`] but silently drops repeated masks.
    pub fn dedup(functions: impl IntoIterator<Item = BitMask>) -> Self {
        let mut out = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for f in functions {
            if seen.insert(f) {
                out.push(f);
            }
        }
        Self::new(out).expect("deduplicated")
    }

    pub fn functions(&self) -> &[BitMask] {
        &self.functions
    }

    /// OR of all function masks.
    pub fn bit_universe(&self) -> BitMask {
        self.bit_universe
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn echelon(&self) -> Echelon {
        Echelon::from_masks(self.functions.iter().copied())
    }

    /// Number of linearly independent masks.
    pub fn rank(&self) -> usize {
        self.echelon().rank()
    }

    /// Basis of address deltas inside the bit universe that leave every
    /// function unchanged. Its size is `|bit_universe| - rank`.
    pub fn nullspace_basis(&self) -> Vec<BitMask> {
        self.echelon().kernel_within(self.bit_universe)
    }

    /// Splits the functions into connected components, two functions being
    /// connected when their masks share a bit. Components keep input order
    /// and are ordered by their first function.
    pub fn disjoint_partition(&self) -> Vec<Gf2System> {
        let n = self.functions.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut owner: [Option<usize>; 64] = [None; 64];
        for (i, f) in self.functions.iter().enumerate() {
            for b in f.iter_bits() {
                match owner[b as usize] {
                    None => owner[b as usize] = Some(i),
                    Some(j) => {
                        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                        if ri != rj {
                            parent[ri.max(rj)] = ri.min(rj);
                        }
                    }
                }
            }
        }
        let mut groups: Vec<(usize, Vec<BitMask>)> = Vec::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            match groups.iter_mut().find(|(r, _)| *r == root) {
                Some((_, g)) => g.push(self.functions[i]),
                None => groups.push((root, vec![self.functions[i]])),
            }
        }
        groups
            .into_iter()
            .map(|(_, g)| Gf2System::new(g).expect("subset of a duplicate-free system"))
            .collect()
    }

    /// True iff both systems have the same GF(2) row space.
    pub fn span_equal(&self, other: &Gf2System) -> bool {
        span_equal(&self.functions, &other.functions)
    }
}

/// True iff the two mask lists span the same GF(2) row space.
pub fn span_equal(a: &[BitMask], b: &[BitMask]) -> bool {
    let ea = Echelon::from_masks(a.iter().copied());
    let eb = Echelon::from_masks(b.iter().copied());
    ea == eb
}

/// Finds an address delta `d` with `parity(mask_i, d) == target_i` for every
/// constraint, setting every free variable to zero.
pub fn solve_delta(constraints: &[(BitMask, bool)]) -> Result<BitMask, Gf2Error> {
    let mut rows: Vec<(u64, bool)> = Vec::with_capacity(constraints.len());
    for &(mask, target) in constraints {
        let (mut m, mut t) = (mask.0, target);
        for &(rm, rt) in &rows {
            if m & (rm & rm.wrapping_neg()) != 0 {
                m ^= rm;
                t ^= rt;
            }
        }
        if m == 0 {
            if t {
                return Err(Gf2Error::InconsistentConstraints);
            }
            continue;
        }
        let pivot = m & m.wrapping_neg();
        for (rm, rt) in &mut rows {
            if *rm & pivot != 0 {
                *rm ^= m;
                *rt ^= t;
            }
        }
        rows.push((m, t));
    }
    Ok(BitMask(rows.iter().filter(|(_, t)| *t).fold(0, |acc, (m, _)| {
        acc | (m & m.wrapping_neg())
    })))
}

/// Inverts an `n x n` GF(2) matrix given as row bitsets (bit `j` of row `i`
/// is entry `(i, j)`). Returns `None` when singular.
pub fn invert(rows: &[u64]) -> Option<Vec<u64>> {
    let n = rows.len();
    assert!(n <= 64, "matrix too large");
    let mut a = rows.to_vec();
    let mut inv: Vec<u64> = (0..n).map(|i| 1u64 << i).collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| (a[r] >> col) & 1 == 1)?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        for r in 0..n {
            if r != col && (a[r] >> col) & 1 == 1 {
                a[r] ^= a[col];
                inv[r] ^= inv[col];
            }
        }
    }
    Some(inv)
}

/// Every element of the span of `basis` (which must be independent).
/// Returns `None` above 2^20 elements.
pub fn enumerate_span(basis: &[BitMask]) -> Option<Vec<BitMask>> {
    if basis.len() > 20 {
        return None;
    }
    let mut out = vec![BitMask::EMPTY];
    for &b in basis {
        let len = out.len();
        for i in 0..len {
            out.push(out[i] ^ b);
        }
    }
    Some(out)
}

/// Picks `count` lowest-weight vectors of `span(upper)` that are independent
/// modulo `span(lower)`, greedily (weight, then value). `lower` must lie in
/// `span(upper)`. Returns `None` when the span is too large to enumerate or
/// fewer than `count` such vectors exist.
pub fn min_weight_complement(
    upper: &[BitMask],
    lower: &[BitMask],
    count: usize,
) -> Option<Vec<BitMask>> {
    let upper_basis: Vec<BitMask> = Echelon::from_masks(upper.iter().copied()).rows().collect();
    let mut all = enumerate_span(&upper_basis)?;
    all.sort_by_key(|v| (v.count(), v.0));
    let mut acc = Echelon::from_masks(lower.iter().copied());
    let mut chosen = Vec::with_capacity(count);
    for v in all {
        if chosen.len() == count {
            break;
        }
        if !v.is_empty() && acc.insert(v) {
            chosen.push(v);
        }
    }
    (chosen.len() == count).then_some(chosen)
}
