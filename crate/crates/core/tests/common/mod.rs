//! Independent oracles and property checks shared by the integration tests.
#![allow(dead_code)]

use dramdecomp::gf2::{solve_delta, span_equal, BitMask, Gf2Error, Gf2System};
use dramdecomp::probe::SimOracle;
use dramdecomp::reference::ReferenceMapping;
use dramdecomp::sim::{NoiseModel, RefreshMode, Simulator, TimingConfig};
use dramdecomp::DramAddressMapping;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

/// Parity by walking the bits one at a time.
pub fn naive_parity(mask: u64, addr: u64) -> bool {
    (0..64).filter(|&i| mask >> i & 1 == 1 && addr >> i & 1 == 1).count() % 2 == 1
}

/// Rank by Gaussian elimination on a dense boolean matrix, pivoting on the
/// highest column.
pub fn naive_rank(masks: &[u64]) -> usize {
    let mut rows: Vec<Vec<bool>> = masks.iter().map(|&m| (0..64).map(|i| m >> i & 1 == 1).collect()).collect();
    let mut rank = 0;
    for col in (0..64).rev() {
        let Some(p) = (rank..rows.len()).find(|&r| rows[r][col]) else {
            continue;
        };
        rows.swap(rank, p);
        for r in 0..rows.len() {
            if r != rank && rows[r][col] {
                let pivot = rows[rank].clone();
                for (x, y) in rows[r].iter_mut().zip(pivot) {
                    *x ^= y;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Number of addresses below `1 << width` on which every mask has even
/// parity, by walking all of them in Gray-code order while tracking which
/// masks currently have odd parity.
pub fn brute_kernel_count(masks: &[u64], width: u32) -> u64 {
    assert!(masks.len() <= 64);
    let column = |bit: u32| masks.iter().enumerate().fold(0u64, |acc, (i, &m)| acc | (m >> bit & 1) << i);
    let columns: Vec<u64> = (0..width).map(column).collect();
    let mut odd = 0u64;
    let mut count = 1;
    for step in 1..1u64 << width {
        odd ^= columns[step.trailing_zeros() as usize];
        count += (odd == 0) as u64;
    }
    count
}

/// Random system of up to `max_len` nonzero masks inside `width` low bits.
pub fn masks_within(width: u32, max_len: usize) -> impl Strategy<Value = Vec<u64>> {
    let hi = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    prop::collection::vec(1..=hi, 0..=max_len)
}

/// Parity is linear in the address.
pub fn check_linearity(mask: u64, a: u64, b: u64) -> Result<(), TestCaseError> {
    let m = BitMask(mask);
    prop_assert_eq!(m.parity(a ^ b), m.parity(a) ^ m.parity(b));
    prop_assert_eq!(m.parity(a), naive_parity(mask, a));
    Ok(())
}

/// Rank matches an independent elimination, and the nullspace basis has
/// `|universe| - rank` independent members, and the exhaustively counted
/// kernel over the `width`-bit range has `2^(width - rank)` members.
pub fn check_rank_nullity(masks: &[u64], width: u32) -> Result<(), TestCaseError> {
    let sys = Gf2System::dedup(masks.iter().map(|&m| BitMask(m)));
    let deduped: Vec<u64> = sys.functions().iter().map(|m| m.0).collect();
    let rank = sys.rank();
    prop_assert_eq!(rank, naive_rank(&deduped));
    let universe = sys.bit_universe();
    let basis = sys.nullspace_basis();
    prop_assert_eq!(basis.len(), universe.count() as usize - rank);
    let basis_raw: Vec<u64> = basis.iter().map(|b| b.0).collect();
    prop_assert_eq!(naive_rank(&basis_raw), basis.len());
    prop_assert_eq!(brute_kernel_count(&deduped, width), 1u64 << (width as usize - rank));
    for b in &basis {
        prop_assert!(b.0 & !universe.0 == 0);
        prop_assert!(deduped.iter().all(|&m| !naive_parity(m, b.0)));
    }
    Ok(())
}

/// XOR of the rows of `masks` selected by `sel`.
pub fn combine(masks: &[u64], sel: u64) -> u64 {
    masks
        .iter()
        .enumerate()
        .filter(|(i, _)| sel >> i & 1 == 1)
        .fold(0, |acc, (_, &m)| acc ^ m)
}

/// Span equality is reflexive, symmetric, transitive, invariant under an
/// invertible change of basis, and agrees with comparing the enumerated
/// spans.
pub fn check_span_laws(a: &[u64], b: &[u64], mix: &[u64]) -> Result<(), TestCaseError> {
    let am: Vec<BitMask> = a.iter().map(|&x| BitMask(x)).collect();
    let bm: Vec<BitMask> = b.iter().map(|&x| BitMask(x)).collect();
    prop_assert!(span_equal(&am, &am));
    prop_assert_eq!(span_equal(&am, &bm), span_equal(&bm, &am));

    // Unitriangular mixing is invertible: row i gains a subset of the rows
    // after it.
    let n = a.len();
    let changed: Vec<u64> = (0..n)
        .map(|i| {
            let later = mix.get(i).copied().unwrap_or(0) & !((1u64 << (i + 1)) - 1) & ((1u64 << n) - 1);
            a[i] ^ combine(a, later)
        })
        .collect();
    let cm: Vec<BitMask> = changed.iter().map(|&x| BitMask(x)).collect();
    prop_assert!(span_equal(&am, &cm));
    prop_assert_eq!(span_equal(&cm, &bm), span_equal(&am, &bm));

    let enumerate = |v: &[u64]| -> std::collections::BTreeSet<u64> { (0..1u64 << v.len()).map(|s| combine(v, s)).collect() };
    if a.len() <= 10 && b.len() <= 10 {
        prop_assert_eq!(span_equal(&am, &bm), enumerate(a) == enumerate(b));
    }
    Ok(())
}

/// A solution satisfies every constraint on re-evaluation; a reported
/// inconsistency is confirmed by exhausting the `width`-bit universe.
pub fn check_solve_delta(constraints: &[(u64, bool)], width: u32) -> Result<(), TestCaseError> {
    let c: Vec<(BitMask, bool)> = constraints.iter().map(|&(m, t)| (BitMask(m), t)).collect();
    match solve_delta(&c) {
        Ok(d) => {
            for &(m, t) in constraints {
                prop_assert_eq!(naive_parity(m, d.0), t);
            }
        }
        Err(Gf2Error::InconsistentConstraints) => {
            let any = (0..1u64 << width).any(|x| constraints.iter().all(|&(m, t)| naive_parity(m, x) == t));
            prop_assert!(!any, "solver reported inconsistency for a solvable system");
        }
        Err(e) => prop_assert!(false, "unexpected error {e}"),
    }
    Ok(())
}

pub fn simulator(mapping: DramAddressMapping, refresh: RefreshMode, sigma: f64, seed: u64) -> Simulator {
    Simulator::new(mapping, TimingConfig::default(), refresh, NoiseModel::gaussian(sigma, seed)).expect("valid simulator")
}

/// Reference mapping on its platform's refresh mode with Gaussian noise.
pub fn reference_oracle(r: &ReferenceMapping, sigma: f64, seed: u64) -> SimOracle {
    SimOracle::new(simulator(r.mapping(), r.refresh_mode(), sigma, seed), seed ^ 0x9e37_79b9)
}
