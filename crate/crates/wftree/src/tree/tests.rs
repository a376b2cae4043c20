use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::reclaim::collect;

fn small() -> TreeConfig {
    TreeConfig::with_sizes(4, 2, 4, 2)
}

fn tree(cfg: TreeConfig) -> Tree {
    Tree::with_config(cfg).unwrap()
}

fn assert_valid(t: &Tree) {
    let r = t.validate_structure();
    assert!(r.is_ok(), "{:?}", r.violations);
}

#[test]
fn config_validation() {
    assert!(TreeConfig::default().validate().is_ok());
    assert!(TreeConfig::with_sizes(4, 2, 4, 2).validate().is_ok());
    assert!(TreeConfig::with_sizes(3, 2, 4, 2).validate().is_err());
    assert!(TreeConfig::with_sizes(4, 1, 4, 2).validate().is_err());
    assert!(TreeConfig::with_sizes(4, 2, 6, 4).validate().is_err());
    assert_eq!(TreeConfig::default().merge_at(), 8);
    assert_eq!(small().merge_at(), 0);
}

#[test]
fn empty_tree_insert_makes_leaf_root() {
    let t = Tree::new();
    assert_eq!(t.delete(5).unwrap(), OpResult::not_present());
    assert_eq!(t.insert(5, 50).unwrap(), OpResult::inserted());
    assert_eq!(t.search(5).unwrap(), Some(50));
    let s = t.stats();
    assert_eq!((s.depth, s.leaves, s.internals), (0, 1, 0));
    assert_eq!(t.insert(5, 51).unwrap(), OpResult::updated(50));
    let s2 = t.stats();
    assert_eq!((s2.leaves, s2.internals, s2.key_nodes, s2.live_keys), (1, 0, 1, 1));
    assert_eq!(s2.versions, s.versions + 1);
}

#[test]
fn leaf_overflow_splits_root() {
    let t = tree(TreeConfig::with_sizes(32, 8, 8, 2));
    for k in 1..=9 {
        assert_eq!(t.insert(k, k * 10).unwrap(), OpResult::inserted());
    }
    let s = t.stats();
    assert_eq!((s.depth, s.leaves, s.internals), (1, 2, 1));
    for k in 1..=9 {
        assert_eq!(t.search(k).unwrap(), Some(k * 10));
    }
    assert_valid(&t);
    assert!(t.counters().splits.get() >= 1);
}

#[test]
fn root_split_separator_is_right_first_key() {
    let t = tree(TreeConfig {
        update_budget: 0,
        ..small()
    });
    for k in [10, 20, 30, 40] {
        t.insert(k, k).unwrap();
    }
    // The fifth insert finds the root leaf full, freezes it and splits {10,20,30,40}.
    t.insert(25, 25).unwrap();
    let g = pin();
    let root = unsafe { t.root.load(Acquire, &g).deref() };
    let i = root.as_internal();
    assert_eq!(i.keys(), &[30]);
    let left = unsafe { i.child(0, &g).deref() }.as_leaf().list.keys(&g);
    let right = unsafe { i.child(1, &g).deref() }.as_leaf().list.keys(&g);
    assert_eq!((left, right), (vec![10, 20, 25], vec![30, 40]));
}

#[test]
fn ascending_inserts_grow_multiple_levels() {
    let t = tree(small());
    for k in 1..=2000 {
        t.insert(k, k).unwrap();
    }
    let s = t.stats();
    assert!(s.depth >= 3, "{s:?}");
    assert_eq!(s.live_keys, 2000);
    assert_valid(&t);
    assert_eq!(t.counters().locality_deferrals.get(), 0);
}

#[test]
fn delete_leaves_history_and_merges() {
    let t = tree(small());
    for k in 1..=200 {
        t.insert(k, k).unwrap();
    }
    let (_, snap) = t.range_query_traced(1, 200).unwrap();
    for k in 1..=190 {
        assert_eq!(t.delete(k).unwrap(), OpResult::updated(k));
    }
    assert_eq!(t.delete(3).unwrap(), OpResult::not_present());
    assert_eq!(t.search(5).unwrap(), None);
    // churn to trigger copies that prune the tombstones
    for r in 0..20 {
        for k in 191..=200 {
            t.insert(k, k + r).unwrap();
        }
    }
    assert_valid(&t);
    assert!(t.counters().merges.get() + t.counters().borrows.get() > 0);
    let got = t.range_query(1, 1000).unwrap();
    assert_eq!(got, (191..=200).map(|k| (k, k + 19)).collect::<Vec<_>>());
    assert!(snap >= 1);
}

#[test]
fn range_query_examples() {
    let t = Tree::new();
    assert_eq!(t.range_query(1, 100).unwrap(), vec![]);
    for k in 1..=10 {
        t.insert(k, k * 2).unwrap();
    }
    assert_eq!(
        t.range_query(3, 7).unwrap(),
        (3..=7).map(|k| (k, k * 2)).collect::<Vec<_>>()
    );
    assert_eq!(t.range_query(11, 20).unwrap(), vec![]);
    assert!(matches!(t.range_query(5, 4), Err(Error::InvalidRange { .. })));
    assert!(t.range_query(0, 4).is_err());
}

#[test]
fn range_query_reads_its_snapshot() {
    let t = tree(small());
    for k in 1..=50 {
        t.insert(k, 1).unwrap();
    }
    let (before, s1) = t.range_query_traced(1, 50).unwrap();
    let (_, ts) = t.insert_traced(7, 2).unwrap();
    assert!(ts.unwrap() > s1);
    t.delete(8).unwrap();
    let (after, s2) = t.range_query_traced(1, 50).unwrap();
    assert_eq!(before.len(), 50);
    assert_eq!(after.len(), 49);
    assert!(after.contains(&(7, 2)));
    assert!(s2 > s1);
}

#[test]
fn reserved_inputs_rejected() {
    let t = Tree::new();
    assert_eq!(t.insert(0, 1), Err(Error::ReservedKey(0)));
    assert_eq!(t.insert(u64::MAX, 1), Err(Error::ReservedKey(u64::MAX)));
    assert_eq!(t.insert(1, TOMBSTONE), Err(Error::ReservedValue(TOMBSTONE)));
    assert_eq!(t.delete(0), Err(Error::ReservedKey(0)));
    assert_eq!(t.search(u64::MAX), Err(Error::ReservedKey(u64::MAX)));
}

#[test]
fn corrupted_fixture_is_flagged() {
    let t = tree(small());
    for k in 1..=40 {
        t.insert(k, k).unwrap();
    }
    assert_valid(&t);
    let g = pin();
    // Break the leaf chain: make the first leaf skip its successor.
    let leaves = t.leaves(&g);
    let first = leaves[0].as_leaf();
    let third = leaves[2] as *const Node;
    let old = first.next(&g);
    unsafe { (*third).as_leaf() };
    first.repair_next(old, Shared::from(third), &g);
    drop(g);
    let r = t.validate_structure();
    assert!(!r.is_ok());
    assert!(r.violations[0].contains("next chain"), "{:?}", r.violations);
}

#[test]
fn drop_frees_everything() {
    let t = tree(small());
    let stats = t.ctx().stats.clone();
    for k in 1..=500 {
        t.insert(k, k).unwrap();
    }
    for k in (1..=500).step_by(2) {
        t.delete(k).unwrap();
    }
    t.range_query(1, 500).unwrap();
    drop(t);
    for _ in 0..64 {
        collect();
        if stats.snapshot().leaves == 0 && stats.snapshot().internals == 0 {
            break;
        }
        std::thread::yield_now();
    }
    let s = stats.snapshot();
    assert_eq!(
        (s.leaves, s.internals, s.key_nodes, s.version_nodes),
        (0, 0, 0, 0),
        "{s:?}"
    );
}

#[test]
fn concurrent_churn_keeps_structure() {
    let t = Arc::new(tree(small()));
    let hs: Vec<_> = (0..4u64)
        .map(|id| {
            let t = t.clone();
            std::thread::spawn(move || {
                let mut x = id * 7919 + 1;
                for i in 0..20_000u64 {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    let k = x % 300 + 1;
                    match i % 4 {
                        0 | 1 => {
                            t.insert(k, i + 1).unwrap();
                        }
                        2 => {
                            t.delete(k).unwrap();
                        }
                        _ => {
                            let r = t.range_query(k, k + 20).unwrap();
                            assert!(r.windows(2).all(|w| w[0].0 < w[1].0));
                        }
                    }
                }
            })
        })
        .collect();
    hs.into_iter().for_each(|h| h.join().unwrap());
    assert_valid(&t);
    assert_eq!(t.counters().search_restarts.get(), 0);
}

#[test]
fn concurrent_disjoint_inserts_all_visible() {
    let t = Arc::new(tree(small()));
    let hs: Vec<_> = (0..4u64)
        .map(|id| {
            let t = t.clone();
            std::thread::spawn(move || {
                for k in 0..2000u64 {
                    t.insert(k * 4 + id + 1, id).unwrap();
                }
            })
        })
        .collect();
    hs.into_iter().for_each(|h| h.join().unwrap());
    assert_valid(&t);
    let all = t.range_query(1, 1_000_000).unwrap();
    assert_eq!(all.len(), 8000);
    for (k, v) in all {
        assert_eq!(v, (k - 1) % 4);
    }
}

#[derive(Clone, Debug)]
enum Op {
    Ins(u64, u64),
    Del(u64),
    Get(u64),
    Range(u64, u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (1u64..64, 1u64..1000).prop_map(|(k, v)| Op::Ins(k, v)),
        3 => (1u64..64).prop_map(Op::Del),
        2 => (1u64..64).prop_map(Op::Get),
        1 => (1u64..64, 0u64..16).prop_map(|(k, w)| Op::Range(k, k + w)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_sorted_map(ops in prop::collection::vec(op(), 1..600)) {
        let t = tree(small());
        let mut m = BTreeMap::new();
        for o in ops {
            match o {
                Op::Ins(k, v) => {
                    let want = OpResult::for_insert(m.insert(k, v));
                    prop_assert_eq!(t.insert(k, v).unwrap(), want);
                }
                Op::Del(k) => {
                    let want = OpResult::for_delete(m.remove(&k));
                    prop_assert_eq!(t.delete(k).unwrap(), want);
                }
                Op::Get(k) => prop_assert_eq!(t.search(k).unwrap(), m.get(&k).copied()),
                Op::Range(lo, hi) => {
                    let want: Vec<_> = m.range(lo..=hi).map(|(&k, &v)| (k, v)).collect();
                    prop_assert_eq!(t.range_query(lo, hi).unwrap(), want);
                }
            }
        }
        let r = t.validate_structure();
        prop_assert!(r.is_ok(), "{:?}", r.violations);
        prop_assert_eq!(r.stats.live_keys, m.len());
    }
}

#[test]
fn replaced_leaves_are_released_while_neighbours_stay() {
    let t = tree(small());
    let stats = t.ctx().stats.clone();
    for k in 1..=40 {
        t.insert(k, k).unwrap();
    }
    // Only keys 30..40 churn; the leaves to their left are never rebuilt, so their `next`
    // links must be moved on for the old generations to be freed.
    for r in 0..3000u64 {
        let k = 30 + r % 10;
        if r % 3 == 0 {
            t.delete(k).unwrap();
        } else {
            t.insert(k, r + 1).unwrap();
        }
    }
    for _ in 0..16 {
        collect();
    }
    assert_valid(&t);
    let leaves = t.stats().leaves as i64;
    assert!(t.counters().copies.get() + t.counters().splits.get() > 100);
    assert!(
        stats.leaves.get() < 4 * leaves + 16,
        "{} allocated for {leaves} in the tree",
        stats.leaves.get()
    );
}
