//! Global timestamps and the list of active range queries.
//!
//! The tracker is a Michael-Scott queue of [`TrackerNode`]s ordered by timestamp. Its tail holds
//! the current global timestamp. A range query appends a node (taking a fresh timestamp) and marks
//! it finished on return; the oldest unfinished node bounds which versions may be pruned.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crossbeam_epoch::{Atomic, Guard, Owned, Shared};

use crate::reclaim::{self, MemStats, Retirable};
use crate::types::{Timestamp, TS_GENESIS};

pub struct TrackerNode {
    ts: Timestamp,
    next: Atomic<TrackerNode>,
    finished: AtomicBool,
    retired: AtomicBool,
    stats: Arc<MemStats>,
}

impl TrackerNode {
    fn alloc(ts: Timestamp, finished: bool, stats: &Arc<MemStats>) -> Owned<Self> {
        stats.tracker_nodes.add(1);
        Owned::new(Self {
            ts,
            next: Atomic::null(),
            finished: AtomicBool::new(finished),
            retired: AtomicBool::new(false),
            stats: stats.clone(),
        })
    }

    pub fn ts(&self) -> Timestamp {
        self.ts
    }

    pub fn is_finished(&self) -> bool {
        self.finished.load(Ordering::Acquire)
    }
}

impl Retirable for TrackerNode {
    fn retired_flag(&self) -> &AtomicBool {
        &self.retired
    }
}

impl Drop for TrackerNode {
    fn drop(&mut self) {
        self.stats.tracker_nodes.sub(1);
    }
}

/// Handle to an appended tracker entry. Valid until passed to [`Tracker::mark_finished`]:
/// unfinished entries are never removed.
#[derive(Clone, Copy, Debug)]
pub struct TrackerHandle {
    node: *const TrackerNode,
    ts: Timestamp,
}

unsafe impl Send for TrackerHandle {}

impl TrackerHandle {
    pub fn ts(&self) -> Timestamp {
        self.ts
    }
}

pub struct Tracker {
    head: Atomic<TrackerNode>,
    tail: Atomic<TrackerNode>,
    stats: Arc<MemStats>,
}

impl Tracker {
    pub fn new(stats: Arc<MemStats>) -> Self {
        let genesis = TrackerNode::alloc(TS_GENESIS, true, &stats);
        let g = unsafe { crossbeam_epoch::unprotected() };
        let s = genesis.into_shared(g);
        Self {
            head: Atomic::from(s),
            tail: Atomic::from(s),
            stats,
        }
    }

    /// The largest timestamp handed out so far (the tail's timestamp).
    pub fn current_ts(&self, guard: &Guard) -> Timestamp {
        let t = self.tail.load(Ordering::Acquire, guard);
        unsafe { t.deref() }.ts
    }

    /// Appends an entry with timestamp `tail.ts + 1` and returns its handle.
    pub fn add_timestamp(&self, guard: &Guard) -> TrackerHandle {
        loop {
            let tail = self.tail.load(Ordering::Acquire, guard);
            let t = unsafe { tail.deref() };
            let next = t.next.load(Ordering::Acquire, guard);
            if !next.is_null() {
                let _ = self
                    .tail
                    .compare_exchange(tail, next, Ordering::AcqRel, Ordering::Acquire, guard);
                continue;
            }
            let node = TrackerNode::alloc(t.ts + 1, false, &self.stats);
            match t
                .next
                .compare_exchange(Shared::null(), node, Ordering::AcqRel, Ordering::Acquire, guard)
            {
                Ok(new) => {
                    let _ = self
                        .tail
                        .compare_exchange(tail, new, Ordering::AcqRel, Ordering::Acquire, guard);
                    let ts = t.ts + 1;
                    return TrackerHandle { node: new.as_raw(), ts };
                }
                Err(e) => {
                    // Dropping the returned `Owned` frees our unpublished node.
                    drop(e.new);
                }
            }
        }
    }

    pub fn mark_finished(&self, h: TrackerHandle) {
        unsafe { &*h.node }.finished.store(true, Ordering::Release);
    }

    /// Drops finished entries from the front and returns the oldest unfinished timestamp, or
    /// `current + 1` when every entry is finished.
    pub fn min_active_ts(&self, guard: &Guard) -> Timestamp {
        loop {
            let head = self.head.load(Ordering::Acquire, guard);
            let h = unsafe { head.deref() };
            if !h.is_finished() {
                return h.ts;
            }
            let next = h.next.load(Ordering::Acquire, guard);
            if next.is_null() {
                return h.ts + 1;
            }
            let tail = self.tail.load(Ordering::Acquire, guard);
            if tail == head {
                let _ = self
                    .tail
                    .compare_exchange(tail, next, Ordering::AcqRel, Ordering::Acquire, guard);
                continue;
            }
            if self
                .head
                .compare_exchange(head, next, Ordering::AcqRel, Ordering::Acquire, guard)
                .is_ok()
            {
                unsafe {
                    let _ = reclaim::retire(head, guard, &self.stats);
                }
            }
        }
    }

    /// True for a tombstone version older than every active range query.
    pub fn prunable(&self, version_ts: Timestamp, is_tombstone: bool, guard: &Guard) -> bool {
        is_tombstone && version_ts < self.min_active_ts(guard)
    }

    /// Number of entries currently linked (test and diagnostics helper).
    pub fn len(&self, guard: &Guard) -> usize {
        let mut n = 0;
        let mut cur = self.head.load(Ordering::Acquire, guard);
        while let Some(c) = unsafe { cur.as_ref() } {
            n += 1;
            cur = c.next.load(Ordering::Acquire, guard);
        }
        n
    }

    pub fn is_empty(&self, guard: &Guard) -> bool {
        self.len(guard) == 0
    }
}

impl Drop for Tracker {
    fn drop(&mut self) {
        unsafe {
            let g = crossbeam_epoch::unprotected();
            let mut cur = self.head.load(Ordering::Relaxed, g);
            while !cur.is_null() {
                let next = cur.deref().next.load(Ordering::Relaxed, g);
                drop(cur.into_owned());
                cur = next;
            }
        }
    }
}
