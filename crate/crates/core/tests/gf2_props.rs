mod common;

use common::*;
use dramdecomp::gf2::{invert, min_weight_complement, solve_delta, BitMask, Echelon, Gf2Error, Gf2System};
use proptest::prelude::*;

proptest! {
    #[test]
    fn parity_is_linear(mask: u64, a: u64, b: u64) {
        check_linearity(mask, a, b)?;
    }

    #[test]
    fn rank_nullity_small(masks in masks_within(12, 10)) {
        check_rank_nullity(&masks, 12)?;
    }

    #[test]
    fn span_laws(a in masks_within(16, 8), b in masks_within(16, 8), mix in prop::collection::vec(any::<u64>(), 8)) {
        check_span_laws(&a, &b, &mix)?;
    }

    #[test]
    fn solve_delta_reverifies(c in prop::collection::vec((1u64..1 << 10, any::<bool>()), 0..12)) {
        check_solve_delta(&c, 10)?;
    }

    #[test]
    fn echelon_insert_tracks_rank(masks in masks_within(40, 20)) {
        let mut e = Echelon::new();
        let mut seen = Vec::new();
        for &m in &masks {
            let before = naive_rank(&seen);
            seen.push(m);
            let grew = naive_rank(&seen) > before;
            prop_assert_eq!(e.insert(BitMask(m)), grew);
            prop_assert!(e.contains(BitMask(m)));
        }
        prop_assert_eq!(e.rank(), naive_rank(&masks));
    }

    #[test]
    fn invert_is_left_inverse(masks in prop::collection::vec(any::<u64>(), 1..10)) {
        let n = masks.len();
        let rows: Vec<u64> = masks.iter().map(|m| m & ((1u64 << n) - 1)).collect();
        match invert(&rows) {
            Some(inv) => {
                // (inv * A) row i = XOR of A rows selected by inv[i].
                for (i, &r) in inv.iter().enumerate() {
                    prop_assert_eq!(combine(&rows, r), 1u64 << i);
                }
            }
            None => prop_assert!(naive_rank(&rows) < n),
        }
    }

    #[test]
    fn min_weight_complement_is_a_lightest_complement(
        upper in masks_within(10, 6),
        pick in any::<u64>(),
    ) {
        let upper: Vec<BitMask> = upper.into_iter().map(BitMask).collect();
        let lower: Vec<BitMask> = upper.iter().enumerate().filter(|(i, _)| pick >> i & 1 == 1).map(|(_, &m)| m).collect();
        let up = Echelon::from_masks(upper.iter().copied());
        let lo = Echelon::from_masks(lower.iter().copied());
        let count = up.rank() - lo.rank();
        let reps = min_weight_complement(&upper, &lower, count).expect("small spans enumerate");
        prop_assert_eq!(reps.len(), count);
        let mut joint = lo.clone();
        for r in &reps {
            prop_assert!(up.contains(*r));
            prop_assert!(joint.insert(*r));
        }
        // No member of the upper span outside the lower span is lighter than
        // the lightest representative.
        let raw: Vec<u64> = upper.iter().map(|m| m.0).collect();
        let lightest = (1..1u64 << raw.len())
            .map(|s| BitMask(combine(&raw, s)))
            .filter(|m| !lo.contains(*m))
            .map(|m| m.count())
            .min();
        if let Some(w) = lightest {
            prop_assert_eq!(reps.iter().map(|r| r.count()).min(), Some(w));
        }
    }
}

#[test]
fn intel_a_bank_subsystem_nullspace_by_enumeration() {
    let m = dramdecomp::reference::by_name("intel-a-1ch-1dpc").unwrap().mapping();
    let sys = Gf2System::dedup(m.function_masks());
    let universe = sys.bit_universe();
    let bits: Vec<u32> = universe.iter_bits().collect();
    let count = (0..1u64 << bits.len())
        .filter(|&sel| {
            let d = bits
                .iter()
                .enumerate()
                .filter(|(i, _)| sel >> i & 1 == 1)
                .fold(0u64, |acc, (_, &b)| acc | 1 << b);
            sys.functions().iter().all(|f| !naive_parity(f.0, d))
        })
        .count();
    assert_eq!(count, 1 << sys.nullspace_basis().len());
    assert_eq!(sys.rank(), naive_rank(&sys.functions().iter().map(|f| f.0).collect::<Vec<_>>()));
}

#[test]
fn solve_delta_on_bank_group_function() {
    let m = dramdecomp::reference::by_name("intel-a-1ch-1dpc").unwrap().mapping();
    let mut c: Vec<(BitMask, bool)> = m.functions().iter().map(|f| (f.mask, f.mask == BitMask(0x2a00))).collect();
    c.extend(m.row_mask().unit_masks().map(|u| (u, false)));
    let d = solve_delta(&c).unwrap();
    for (mask, t) in c {
        assert_eq!(naive_parity(mask.0, d.0), t);
    }
    assert_eq!(
        solve_delta(&[(BitMask(0x40), true), (BitMask(0x40), false)]),
        Err(Gf2Error::InconsistentConstraints)
    );
}

#[test]
fn disjoint_partition_matches_flood_fill() {
    let m = dramdecomp::reference::by_name("intel-a-1ch-1dpc").unwrap().mapping();
    let mut masks = m.function_masks();
    masks.push(m.row_mask());
    masks.push(m.col_mask());
    let sys = Gf2System::dedup(masks.clone());
    // Flood fill over the "shares a bit" graph.
    let mut comp = vec![usize::MAX; masks.len()];
    let mut next = 0;
    for s in 0..masks.len() {
        if comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = next;
        while let Some(i) = stack.pop() {
            for j in 0..masks.len() {
                if comp[j] == usize::MAX && masks[i] & masks[j] != BitMask::EMPTY {
                    comp[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    let parts = sys.disjoint_partition();
    assert_eq!(parts.len(), next);
    for p in &parts {
        let ids: std::collections::BTreeSet<usize> = p
            .functions()
            .iter()
            .map(|f| comp[masks.iter().position(|m| m == f).unwrap()])
            .collect();
        assert_eq!(ids.len(), 1);
    }
}
