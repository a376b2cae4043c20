use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use super::*;
use crate::hooks::HookAction;
use crate::reclaim::collect;

fn small() -> TreeConfig {
    TreeConfig::with_sizes(4, 2, 4, 2)
}

fn wf(f: usize, s: usize, threads: usize) -> WfTree {
    WfTree::with_config(
        small(),
        WaitFreeConfig {
            fast_path_retries: f,
            helping_period: s,
            max_threads: threads,
        },
    )
    .unwrap()
}

/// Fails every fast-path attempt made on a thread marked by `forced`.
fn force_slow_path(t: &WfTree) -> Arc<dyn Fn(bool) + Send + Sync> {
    thread_local! {
        static FORCED: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
    }
    t.tree().ctx().hooks.set(hooks::FAST_ATTEMPT, |_| {
        if FORCED.with(|f| f.get()) {
            HookAction::Fail
        } else {
            HookAction::Continue
        }
    });
    Arc::new(|on| FORCED.with(|f| f.set(on)))
}

#[test]
fn config_validation() {
    assert!(WaitFreeConfig::default().validate().is_ok());
    let bad = WaitFreeConfig {
        fast_path_retries: 0,
        ..Default::default()
    };
    assert!(WfTree::with_config(small(), bad).is_err());
}

#[test]
fn uncontended_ops_stay_on_fast_path() {
    let t = wf(8, 3, 4);
    let mut h = t.register().unwrap();
    assert_eq!(h.insert(5, 50).unwrap(), OpResult::inserted());
    assert_eq!(h.insert(5, 51).unwrap(), OpResult::updated(50));
    assert_eq!(h.delete(5).unwrap(), OpResult::updated(51));
    assert_eq!(h.delete(5).unwrap(), OpResult::not_present());
    assert_eq!(h.search(5).unwrap(), None);
    assert_eq!(t.counters().slow_path_entries.get(), 0);
    let g = pin();
    assert_eq!(t.state(h.tid(), &g).phase, 0);
}

#[test]
fn forced_failures_announce_and_complete() {
    let t = wf(2, 3, 4);
    let force = force_slow_path(&t);
    let mut h = t.register().unwrap();
    force(true);
    assert_eq!(h.insert(5, 50).unwrap(), OpResult::inserted());
    assert_eq!(h.insert(5, 51).unwrap(), OpResult::updated(50));
    assert_eq!(h.delete(5).unwrap(), OpResult::updated(51));
    assert_eq!(h.delete(5).unwrap(), OpResult::not_present());
    assert_eq!(h.delete(6).unwrap(), OpResult::not_present());
    for k in 10..60 {
        assert_eq!(h.insert(k, k).unwrap(), OpResult::inserted());
    }
    force(false);
    assert_eq!(t.counters().slow_path_entries.get(), 55);
    let g = pin();
    assert_eq!(t.state(h.tid(), &g).phase, 55);
    drop(g);
    assert_eq!(h.range_query(1, 100).unwrap().len(), 50);
    assert_eq!(h.search(5).unwrap(), None);
    let r = t.tree().validate_structure();
    assert!(r.is_ok(), "{:?}", r.violations);
    // f forced failures, plus at most a restart after freezing a full leaf; within f + s * threads.
    let worst = t.counters().max_attempts.load(Ordering::Relaxed);
    assert!((2..=2 + 3).contains(&worst), "{worst}");
}

#[test]
fn traced_slow_path_reports_effect_timestamp() {
    let t = wf(1, 3, 2);
    let force = force_slow_path(&t);
    let mut h = t.register().unwrap();
    force(true);
    let (r, ts) = h.insert_traced(3, 30).unwrap();
    assert_eq!(r, OpResult::inserted());
    assert!(ts.unwrap() >= 1);
    let (r, ts) = h.delete_traced(4).unwrap();
    assert_eq!((r, ts), (OpResult::not_present(), None));
    let (_, snap) = h.range_query_traced(1, 10).unwrap();
    let (r, ts2) = h.delete_traced(3).unwrap();
    assert_eq!(r, OpResult::updated(30));
    assert!(ts2.unwrap() > snap);
}

#[test]
fn check_help_without_announcements_only_advances() {
    let t = wf(8, 1, 4);
    let mut a = t.register().unwrap();
    let _b = t.register().unwrap();
    let _c = t.register().unwrap();
    let before = t.tree().ctx().stats.snapshot();
    let mut seen = Vec::new();
    for _ in 0..4 {
        a.check_help();
        seen.push(a.help_record().curr_tid);
    }
    assert_eq!(seen, vec![2, 1, 2, 1]);
    assert_eq!(t.counters().helped_ops.get(), 0);
    assert_eq!(t.tree().ctx().stats.snapshot(), before);
}

#[test]
fn stale_phase_is_skipped() {
    let t = wf(1, 1, 2);
    let a = t.register().unwrap();
    let mut b = t.register().unwrap();
    let announce = |phase, key| {
        let g = pin();
        let st = OperationState::new(phase, UpdateKind::Insert, key, key * 10, &t.tree().ctx().stats);
        let old = t.slots[a.tid()].swap(Owned::new(st), AcqRel, &g);
        unsafe { drop(old.into_owned()) };
    };
    // b recorded phase 1 for a's slot, but a has since moved on to phase 2.
    announce(2, 9);
    b.help.curr_tid = a.tid();
    b.help.last_phase = Some(1);
    b.help.next_check = 1;
    let before = t.tree().ctx().stats.snapshot();
    b.check_help();
    assert_eq!(t.counters().helped_ops.get(), 0);
    assert_eq!(t.tree().ctx().stats.snapshot(), before);
    assert_eq!(t.tree().search(9).unwrap(), None);
    // Recorded while pending with the same phase: helped.
    b.help.curr_tid = a.tid();
    b.help.last_phase = Some(2);
    b.help.next_check = 1;
    b.check_help();
    assert_eq!(t.counters().helped_ops.get(), 1);
    assert_eq!(t.tree().search(9).unwrap(), Some(90));
    // Finished slot: nothing to do.
    b.help.curr_tid = a.tid();
    b.help.last_phase = Some(2);
    b.help.next_check = 1;
    b.check_help();
    assert_eq!(t.counters().helped_ops.get(), 1);
}

#[test]
fn suspended_announcer_is_completed_by_helpers() {
    let t = wf(1, 3, 4);
    let force = force_slow_path(&t);
    let release = Arc::new(AtomicBool::new(false));
    let announced = Arc::new(AtomicBool::new(false));
    {
        let (release, announced) = (release.clone(), announced.clone());
        t.tree().ctx().hooks.set(hooks::AFTER_ANNOUNCE, move |_| {
            announced.store(true, Ordering::SeqCst);
            while !release.load(Ordering::SeqCst) {
                std::thread::yield_now();
            }
            HookAction::Continue
        });
    }
    let helper_ops = AtomicUsize::new(0);
    std::thread::scope(|s| {
        let announcer = s.spawn(|| {
            let mut h = t.register().unwrap();
            force(true);
            let r = h.insert(77, 7).unwrap();
            force(false);
            (h.tid(), r)
        });
        while !announced.load(Ordering::SeqCst) {
            std::thread::yield_now();
        }
        let tid = {
            let g = pin();
            (0..4).find(|&i| !t.state(i, &g).is_finished()).unwrap()
        };
        let mut helpers: Vec<_> = (0..3).map(|_| t.register().unwrap()).collect();
        let mut rounds = 0;
        loop {
            let g = pin();
            if t.state(tid, &g).is_finished() {
                break;
            }
            drop(g);
            for h in helpers.iter_mut() {
                h.search(1).unwrap();
                helper_ops.fetch_add(1, Ordering::Relaxed);
            }
            rounds += 1;
            assert!(rounds <= 3 * 4, "not helped within s * threads operations each");
        }
        release.store(true, Ordering::SeqCst);
        let (_, r) = announcer.join().unwrap();
        assert_eq!(r, OpResult::inserted());
    });
    assert_eq!(t.tree().search(77).unwrap(), Some(7));
    assert!(t.counters().helped_ops.get() >= 1);
}

#[test]
fn racing_delete_resolution_agrees() {
    let t = wf(1, 3, 4);
    let g = pin();
    t.tree().insert(5, 50).unwrap();
    let st = OperationState::new(1, UpdateKind::Delete, 5, TOMBSTONE, &t.tree().ctx().stats);
    let Located::Leaf(leaf, _) = t.tree().locate(5, false, &g) else {
        panic!("no leaf");
    };
    assert_eq!(t.resolve_search(&st, true), SEARCH_PRESENT);
    assert_eq!(t.resolve_search(&st, false), SEARCH_PRESENT);
    assert!(!st.is_finished());
    assert!(t.wf_delete_leaf(leaf, &st, false, &g));
    assert!(t.wf_delete_leaf(leaf, &st, false, &g));
    assert!(st.is_finished());
    assert_eq!(st.outcome().0, OpResult::updated(50));
    assert_eq!(leaf.as_leaf().list.occurrences(st.vnode(), &g), 1);
    let absent = OperationState::new(2, UpdateKind::Delete, 6, TOMBSTONE, &t.tree().ctx().stats);
    assert!(t.wf_delete_leaf(leaf, &absent, false, &g));
    assert!(absent.is_finished());
    assert_eq!(absent.outcome(), (OpResult::not_present(), None));
}

#[test]
fn concurrent_slow_path_matches_per_thread_keys() {
    let t = wf(1, 2, 8);
    let force = force_slow_path(&t);
    std::thread::scope(|s| {
        for id in 0..4u64 {
            let (t, force) = (&t, force.clone());
            s.spawn(move || {
                let mut h = t.register().unwrap();
                let mut mine: HashMap<u64, u64> = HashMap::new();
                let mut x = id + 11;
                for i in 0..3000u64 {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    force((x >> 60) % 2 == 0);
                    // Threads own disjoint keys, so results are predictable per thread.
                    let k = (x >> 33) % 64 * 4 + id + 1;
                    if (x >> 20) % 3 == 0 {
                        assert_eq!(h.delete(k).unwrap(), OpResult::for_delete(mine.remove(&k)));
                    } else {
                        assert_eq!(h.insert(k, i + 1).unwrap(), OpResult::for_insert(mine.insert(k, i + 1)));
                    }
                }
                force(false);
                for (k, v) in mine {
                    assert_eq!(h.search(k).unwrap(), Some(v));
                }
            });
        }
    });
    let r = t.tree().validate_structure();
    assert!(r.is_ok(), "{:?}", r.violations);
    assert!(t.counters().slow_path_entries.get() > 1000);
}

#[test]
fn drop_releases_states_and_versions() {
    let t = wf(1, 2, 4);
    let stats = t.tree().ctx().stats.clone();
    let force = force_slow_path(&t);
    {
        let mut h = t.register().unwrap();
        force(true);
        for k in 1..200 {
            h.insert(k, k).unwrap();
            if k % 3 == 0 {
                h.delete(k - 1).unwrap();
            }
        }
        force(false);
    }
    drop(t);
    for _ in 0..64 {
        collect();
        let s = stats.snapshot();
        if s.version_nodes == 0 && s.states == 0 && s.leaves == 0 {
            break;
        }
        std::thread::yield_now();
    }
    let s = stats.snapshot();
    assert_eq!(
        (s.version_nodes, s.states, s.key_nodes, s.leaves),
        (0, 0, 0, 0),
        "{s:?}"
    );
}
