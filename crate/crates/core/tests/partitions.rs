mod common;

use common::*;
use proptest::prelude::*;
use seesaw::blocks::{default_share_width, make_partition, make_seesaw_permutation};
use seesaw::ChannelPartition;

/// `counts[d][s]`: channels of destination group `d` taken from source group `s`.
fn flow_counts(src: &ChannelPartition, dst: &ChannelPartition) -> Vec<Vec<usize>> {
    let perm = make_seesaw_permutation(src, dst).unwrap();
    let mut counts = vec![vec![0; src.len()]; dst.len()];
    for out in 0..dst.total() {
        let d = dst.group_of(out).unwrap();
        let s = src.group_of(perm.source(out)).unwrap();
        counts[d][s] += 1;
    }
    counts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn flows_are_proportional(src in prop::collection::vec(1usize..8, 1..5), seed in any::<u64>()) {
        let total: usize = src.iter().sum();
        // A destination partition of the same total with a random group count.
        let mut r = rng(seed);
        let groups = rand::Rng::gen_range(&mut r, 1..=total.min(4));
        let mut cuts: Vec<usize> = rand::seq::index::sample(&mut r, total - 1, groups - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        cuts.sort_unstable();
        cuts.push(total);
        let dst: Vec<usize> = cuts.iter().scan(0, |prev, &c| { let s = c - *prev; *prev = c; Some(s) }).collect();
        let (sp, dp) = (partition(&src), partition(&dst));
        let counts = flow_counts(&sp, &dp);
        let mut all_reachable = true;
        for (d, row) in counts.iter().enumerate() {
            for (s, &n) in row.iter().enumerate() {
                let ideal = dst[d] * src[s];
                prop_assert!(n * total <= ideal + total - 1 && ideal < (n + 1) * total,
                    "n[{d}][{s}]={n} for ideal {ideal}/{total}");
                all_reachable &= ideal >= total;
            }
        }
        if all_reachable {
            prop_assert!(counts.iter().flatten().all(|&n| n > 0));
        }
    }
}

#[test]
fn even_groups_give_the_shuffle_transpose() {
    for (groups, size) in [(2, 2), (3, 3), (2, 5), (4, 3)] {
        let p = ChannelPartition::even(groups * size, groups).unwrap();
        let perm = make_seesaw_permutation(&p, &p).unwrap();
        let transpose: Vec<usize> = (0..groups * size).map(|i| (i % groups) * size + i / groups).collect();
        assert_eq!(perm.as_slice(), transpose.as_slice(), "{groups}x{size}");
    }
}

#[test]
fn seesaw_split_feeds_every_group_from_both_sides() {
    for hidden in [12, 24, 96, 144, 576] {
        let p = make_partition(hidden, &[1, 2]).unwrap();
        let counts = flow_counts(&p, &p);
        assert!(counts.iter().flatten().all(|&n| n > 0), "{hidden}: {counts:?}");
    }
}

#[test]
fn largest_remainder_partitions() {
    assert_eq!(make_partition(24, &[1, 2]).unwrap().sizes(), &[8, 16]);
    assert_eq!(make_partition(16, &[1, 2]).unwrap().sizes(), &[5, 11]);
    assert_eq!(make_partition(10, &[1, 1, 1]).unwrap().sizes(), &[4, 3, 3]);
    assert_eq!(make_partition(7, &[1]).unwrap().sizes(), &[7]);
    assert!(make_partition(1, &[1, 2]).is_err());
    assert!(make_partition(2, &[1, 9]).is_err());
    assert!(make_partition(8, &[1, 0]).is_err());
}

#[test]
fn default_share_width_scales_with_smallest_group() {
    assert_eq!(default_share_width(&partition(&[4, 8])), 1);
    assert_eq!(default_share_width(&partition(&[16, 32])), 2);
    assert_eq!(default_share_width(&partition(&[17, 34])), 3);
}

#[test]
fn even_split_minimizes_matched_grouped_cost() {
    for groups in [2, 3] {
        let even = vec![12 / groups; groups];
        let best = grouped_cost(&even, &even);
        for p in compositions(12, groups) {
            let cost = grouped_cost(&p, &p);
            assert!(cost >= best, "{p:?}");
            assert_eq!(cost == best, p == even, "{p:?}");
        }
    }
}

/// Sorting both by `a` leaves `b` non-decreasing too.
fn similarly_ordered(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| a[i] <= a[j] || b[i] >= b[j]))
}

#[test]
fn even_split_minimizes_similarly_ordered_cost() {
    for groups in [2, 3] {
        let best = 144 / groups;
        let parts = compositions(12, groups);
        let mut checked = 0;
        for pin in &parts {
            for pout in parts.iter().filter(|q| similarly_ordered(pin, q)) {
                assert!(grouped_cost(pin, pout) >= best, "{pin:?} {pout:?}");
                checked += 1;
            }
        }
        assert!(checked > parts.len());
    }
}

#[test]
fn opposite_orders_can_beat_the_even_split() {
    // Without an ordering constraint the minimum is not the even split.
    let parts = compositions(12, 2);
    let (cost, pin, pout) = parts
        .iter()
        .flat_map(|a| parts.iter().map(move |b| (grouped_cost(a, b), a.clone(), b.clone())))
        .min()
        .unwrap();
    assert_eq!((cost, pin, pout), (22, vec![1, 11], vec![11, 1]));
    assert!(cost < 72);
}
