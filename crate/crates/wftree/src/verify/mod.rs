//! Correctness machinery: a sequential oracle, history recording, linearizability checking of
//! small histories, snapshot reconstruction and stress runs with post-run validation.

pub mod campaign;
pub mod history;
pub mod lincheck;
pub mod oracle;
#[cfg(feature = "test-hooks")]
pub mod schedules;
pub mod snapshot;
pub mod stress;

pub use campaign::{lincheck_campaign, CampaignConfig, CampaignReport};
pub use history::{EventKind, HistoryEvent, Op, Recorder, Ret};
pub use lincheck::{check_linearizable, CheckError, Verdict};
pub use oracle::{Effect, Replay, SequentialOracle};
pub use snapshot::{snapshot_check, RangeRecord, SnapshotReport};
pub use stress::{stress, Mix, StressConfig, StressReport};

use crate::waitfree::WfTree;

/// Makes threads yield at one in `yield_one_in` pause points and fails one in `fail_one_in`
/// fast-path attempts, so that even one core interleaves operations mid-flight and exercises
/// the slow path. Returns whether hooks are compiled in; without them this does nothing.
#[cfg(feature = "test-hooks")]
pub fn perturb(t: &WfTree, yield_one_in: u32, fail_one_in: u32) -> bool {
    use crate::hooks::{self, HookAction};
    use std::cell::Cell;

    thread_local! {
        static RNG: Cell<u64> = Cell::new({
            let id = std::thread::current().id();
            let h = std::hash::BuildHasher::hash_one(&std::collections::hash_map::RandomState::new(), id);
            h | 1
        });
    }
    fn roll(n: u32) -> bool {
        n > 0
            && RNG.with(|r| {
                let mut x = r.get();
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                r.set(x);
                x % n as u64 == 0
            })
    }
    if yield_one_in == 0 && fail_one_in == 0 {
        return true;
    }
    for &p in hooks::ALL {
        t.tree().ctx().hooks.set(p, move |point| {
            if roll(yield_one_in) {
                std::thread::yield_now();
            }
            if point == hooks::FAST_ATTEMPT && roll(fail_one_in) {
                HookAction::Fail
            } else {
                HookAction::Continue
            }
        });
    }
    true
}

#[cfg(not(feature = "test-hooks"))]
pub fn perturb(_t: &WfTree, _yield_one_in: u32, _fail_one_in: u32) -> bool {
    false
}
