//! Deferred reclamation on top of `crossbeam-epoch`, plus per-structure allocation counters.
//!
//! Every public operation runs under a pinned [`Guard`]. Nodes unlinked by a successful
//! replacement are handed to [`retire`], which defers the destructor until every guard pinned
//! before the retirement has been dropped. Range queries keep their guard for the whole scan.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize, Ordering};

use crossbeam_epoch::{self as epoch, Shared};
use crossbeam_utils::CachePadded;

pub use crossbeam_epoch::Guard;

/// Pins the current thread. Nested pins are allowed; the thread stays pinned until the
/// outermost guard is dropped.
pub fn pin() -> Guard {
    epoch::pin()
}

/// Drops `guard`, unpinning the thread if it was the outermost one.
pub fn unpin(guard: Guard) {
    drop(guard)
}

/// Pushes deferred destructors of the calling thread towards execution.
pub fn collect() {
    for _ in 0..4 {
        let g = epoch::pin();
        g.flush();
    }
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
#[error("node already retired")]
pub struct DoubleRetire;

/// Implemented by nodes that can be retired; the flag makes a second retirement detectable.
pub trait Retirable {
    fn retired_flag(&self) -> &AtomicBool;
}

/// Schedules `ptr` for destruction once no thread pinned at or before now can still reach it.
///
/// # Safety
/// `ptr` must be unreachable for threads that pin after this call, and must have been
/// allocated through `Owned`/`Box`.
pub unsafe fn retire<T: Retirable + 'static>(
    ptr: Shared<'_, T>,
    guard: &Guard,
    stats: &MemStats,
) -> Result<(), DoubleRetire> {
    let node = ptr.deref();
    if node.retired_flag().swap(true, Ordering::AcqRel) {
        return Err(DoubleRetire);
    }
    stats.retired.add(1);
    guard.defer_destroy(ptr);
    Ok(())
}

const STRIPES: usize = 16;

thread_local! {
    static STRIPE: Cell<usize> = const { Cell::new(usize::MAX) };
}

static NEXT_STRIPE: AtomicUsize = AtomicUsize::new(0);

fn stripe() -> usize {
    STRIPE.with(|s| {
        let v = s.get();
        if v != usize::MAX {
            return v;
        }
        let v = NEXT_STRIPE.fetch_add(1, Ordering::Relaxed) % STRIPES;
        s.set(v);
        v
    })
}

/// Signed counter split across cache lines so hot paths do not contend on one word.
pub struct Counter {
    cells: [CachePadded<AtomicI64>; STRIPES],
}

impl Default for Counter {
    fn default() -> Self {
        Self {
            cells: std::array::from_fn(|_| CachePadded::new(AtomicI64::new(0))),
        }
    }
}

impl Counter {
    #[inline]
    pub fn add(&self, n: i64) {
        self.cells[stripe()].fetch_add(n, Ordering::Relaxed);
    }

    #[inline]
    pub fn sub(&self, n: i64) {
        self.add(-n)
    }

    pub fn get(&self) -> i64 {
        self.cells.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }
}

impl std::fmt::Debug for Counter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.get())
    }
}

/// Live-object counters of one structure. Incremented on allocation, decremented when the
/// destructor runs, so they include retired-but-not-yet-freed garbage.
#[derive(Default, Debug)]
pub struct MemStats {
    pub version_nodes: Counter,
    pub key_nodes: Counter,
    pub leaves: Counter,
    pub internals: Counter,
    pub tracker_nodes: Counter,
    pub states: Counter,
    pub retired: Counter,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemSnapshot {
    pub version_nodes: i64,
    pub key_nodes: i64,
    pub leaves: i64,
    pub internals: i64,
    pub tracker_nodes: i64,
    pub states: i64,
    pub retired: i64,
}

impl MemStats {
    pub fn snapshot(&self) -> MemSnapshot {
        MemSnapshot {
            version_nodes: self.version_nodes.get(),
            key_nodes: self.key_nodes.get(),
            leaves: self.leaves.get(),
            internals: self.internals.get(),
            tracker_nodes: self.tracker_nodes.get(),
            states: self.states.get(),
            retired: self.retired.get(),
        }
    }
}
