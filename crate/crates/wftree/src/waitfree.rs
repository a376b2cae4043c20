//! Wait-free updates by fast-path/slow-path helping.
//!
//! An update first runs the lock-free code up to `fast_path_retries` times. If it still has not
//! taken effect, the thread announces it in its slot of the state array: the key, a
//! pre-allocated version node holding the new value (a tombstone for deletes), and a
//! `finished` flag. From then on every participant that installs the operation uses that same
//! version node, so however many threads work on it the version is installed at most once.
//! Each thread, every `helping_period` completed operations, looks at one other slot in
//! round-robin order and completes the operation announced there if it is still pending.

use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed, Release, SeqCst};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8};
use std::sync::Arc;

use crossbeam_epoch::{Atomic, Guard, Owned};
use crossbeam_utils::CachePadded;

use crate::hooks::{self, HookAction};
use crate::reclaim::{self, pin, Counter, MemStats, Retirable};
use crate::tree::{Located, Node, Tree, TreeConfig};
use crate::types::*;
use crate::vlist::{Announcement, VersionNode, VersionedList, WfOutcome};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WaitFreeConfig {
    /// Failed lock-free attempts before an update is announced (f).
    pub fast_path_retries: usize,
    /// Completed operations between two helping checks (s).
    pub helping_period: usize,
    /// Capacity of the state array.
    pub max_threads: usize,
}

impl Default for WaitFreeConfig {
    fn default() -> Self {
        Self {
            fast_path_retries: 8,
            helping_period: 3,
            max_threads: 64,
        }
    }
}

impl WaitFreeConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.fast_path_retries == 0 || self.helping_period == 0 || self.max_threads == 0 {
            return Err(Error::Config(
                "fast_path_retries, helping_period and max_threads must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Insert,
    Delete,
}

// Delete announcements agree once on whether the key was present.
const SEARCH_UNRESOLVED: u8 = 0;
const SEARCH_PRESENT: u8 = 1;
const SEARCH_ABSENT: u8 = 2;

/// One announced update.
pub struct OperationState {
    pub phase: u64,
    pub kind: UpdateKind,
    pub key: Key,
    finished: AtomicBool,
    vnode: *const VersionNode,
    search: AtomicU8,
    retired: AtomicBool,
    stats: Arc<MemStats>,
}

unsafe impl Send for OperationState {}
unsafe impl Sync for OperationState {}

impl OperationState {
    fn new(phase: u64, kind: UpdateKind, key: Key, value: Value, stats: &Arc<MemStats>) -> Self {
        stats.states.add(1);
        Self {
            phase,
            kind,
            key,
            finished: AtomicBool::new(false),
            vnode: VersionNode::alloc_shared(value, stats),
            search: AtomicU8::new(SEARCH_UNRESOLVED),
            retired: AtomicBool::new(false),
            stats: stats.clone(),
        }
    }

    fn idle(stats: &Arc<MemStats>) -> Self {
        stats.states.add(1);
        Self {
            phase: 0,
            kind: UpdateKind::Insert,
            key: 0,
            finished: AtomicBool::new(true),
            vnode: std::ptr::null(),
            search: AtomicU8::new(SEARCH_ABSENT),
            retired: AtomicBool::new(false),
            stats: stats.clone(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished.load(SeqCst)
    }

    pub fn vnode(&self) -> &VersionNode {
        unsafe { &*self.vnode }
    }

    fn announcement(&self) -> Announcement<'_> {
        Announcement {
            vnode: self.vnode(),
            finished: &self.finished,
        }
    }

    /// Result and effect timestamp. Only meaningful once finished, and only while the version
    /// it displaced is still protected by the caller's guard.
    fn outcome(&self) -> (OpResult, Option<Timestamp>) {
        if self.search.load(SeqCst) == SEARCH_ABSENT {
            return (OpResult::not_present(), None);
        }
        let v = self.vnode();
        let prior = unsafe { v.older().as_ref() }.map(|o| o.value());
        let r = match self.kind {
            UpdateKind::Insert => OpResult::for_insert(prior),
            UpdateKind::Delete => OpResult::for_delete(prior),
        };
        (r, Some(v.ts()))
    }
}

impl Retirable for OperationState {
    fn retired_flag(&self) -> &AtomicBool {
        &self.retired
    }
}

impl Drop for OperationState {
    fn drop(&mut self) {
        if !self.vnode.is_null() {
            unsafe { VersionNode::release(self.vnode, &self.stats) };
        }
        self.stats.states.sub(1);
    }
}

/// Which slot a thread checks next, and the phase it saw there.
#[derive(Clone, Debug)]
pub struct HelpRecord {
    pub curr_tid: usize,
    /// Phase of the pending operation recorded for `curr_tid`, or `None` if the slot had
    /// nothing pending when recorded (so any later announcement qualifies).
    pub last_phase: Option<u64>,
    pub next_check: usize,
}

#[derive(Default, Debug)]
pub struct WaitFreeCounters {
    pub fast_path_ops: Counter,
    /// Updates that exhausted the fast path and were announced.
    pub slow_path_entries: Counter,
    /// Announced operations this thread worked on for another slot.
    pub helped_ops: Counter,
    /// Helping checks that found nothing to do.
    pub help_skips: Counter,
    /// Largest number of failed attempts by any single update.
    pub max_attempts: AtomicU64,
}

pub struct WfTree {
    tree: Tree,
    cfg: WaitFreeConfig,
    slots: Vec<CachePadded<Atomic<OperationState>>>,
    taken: Vec<AtomicBool>,
    counters: WaitFreeCounters,
}

unsafe impl Send for WfTree {}
unsafe impl Sync for WfTree {}

impl Default for WfTree {
    fn default() -> Self {
        Self::new()
    }
}

impl WfTree {
    pub fn new() -> Self {
        Self::with_config(TreeConfig::default(), WaitFreeConfig::default()).expect("default config is valid")
    }

    pub fn with_config(tree: TreeConfig, cfg: WaitFreeConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let tree = Tree::with_config(tree)?;
        let stats = tree.ctx().stats.clone();
        let slots = (0..cfg.max_threads)
            .map(|_| CachePadded::new(Atomic::new(OperationState::idle(&stats))))
            .collect();
        let taken = (0..cfg.max_threads).map(|_| AtomicBool::new(false)).collect();
        Ok(Self {
            tree,
            cfg,
            slots,
            taken,
            counters: WaitFreeCounters::default(),
        })
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn config(&self) -> &WaitFreeConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &WaitFreeCounters {
        &self.counters
    }

    /// Claims a free slot in the state array.
    pub fn register(&self) -> Result<Handle<'_>, Error> {
        let n = self.cfg.max_threads;
        for tid in 0..n {
            if self.taken[tid].compare_exchange(false, true, AcqRel, Relaxed).is_ok() {
                let g = pin();
                let phase = unsafe { self.slots[tid].load(Acquire, &g).deref() }.phase;
                return Ok(Handle {
                    t: self,
                    tid,
                    phase,
                    help: HelpRecord {
                        curr_tid: (tid + 1) % n,
                        last_phase: None,
                        next_check: self.cfg.helping_period,
                    },
                });
            }
        }
        Err(Error::NoFreeSlot(n))
    }

    pub fn registered(&self) -> usize {
        self.taken.iter().filter(|t| t.load(Relaxed)).count()
    }

    /// The state currently announced in slot `tid`.
    pub fn state<'g>(&self, tid: usize, g: &'g Guard) -> &'g OperationState {
        unsafe { self.slots[tid].load(Acquire, g).deref() }
    }

    /// Runs the announced operation `st` until it is finished.
    fn complete(&self, st: &OperationState, own: bool, g: &Guard) -> u64 {
        let mut failures = 0;
        while !st.is_finished() {
            let create = st.kind == UpdateKind::Insert;
            let done = match self.tree.locate(st.key, create, g) {
                Located::Leaf(leaf, has_parent) => match st.kind {
                    UpdateKind::Insert => self.wf_insert_leaf(leaf, st, false, g),
                    UpdateKind::Delete => self.wf_delete_leaf(leaf, st, has_parent, g),
                },
                Located::Empty => {
                    self.resolve_search(st, false);
                    true
                }
                Located::Retry => false,
            };
            if !done {
                failures += 1;
                if own {
                    self.tree.counters().restarts.add(1);
                }
            }
        }
        failures
    }

    /// Fixes the presence decision of a delete announcement; the first decision wins.
    fn resolve_search(&self, st: &OperationState, present: bool) -> u8 {
        let want = if present { SEARCH_PRESENT } else { SEARCH_ABSENT };
        let got = match st.search.compare_exchange(SEARCH_UNRESOLVED, want, SeqCst, SeqCst) {
            Ok(_) => want,
            Err(cur) => cur,
        };
        if got == SEARCH_ABSENT {
            st.finished.store(true, SeqCst);
        }
        got
    }

    /// Installs `st`'s version in `leaf`. False means the leaf is frozen: rebalance and retry.
    pub(crate) fn wf_insert_leaf(&self, leaf: &Node, st: &OperationState, may_merge: bool, g: &Guard) -> bool {
        if st.is_finished() {
            return true;
        }
        if !self.tree.admit(leaf, g) {
            return false;
        }
        let l = leaf.as_leaf();
        let cx = self.tree.ctx();
        match l.list.wf_insert(st.key, &st.announcement(), cx, g) {
            WfOutcome::Installed => {
                let prior = unsafe { st.vnode().older().as_ref() }.map(|o| o.value());
                if prior.is_none() {
                    l.bump_count();
                }
                l.bump_updates();
                self.tree.note_effect(leaf, prior, st.vnode().value(), may_merge, g);
                true
            }
            WfOutcome::Finished => true,
            WfOutcome::Failed => {
                self.tree.freeze_leaf(leaf, g);
                false
            }
        }
    }

    pub(crate) fn wf_delete_leaf(&self, leaf: &Node, st: &OperationState, may_merge: bool, g: &Guard) -> bool {
        if st.is_finished() {
            return true;
        }
        if !self.tree.admit(leaf, g) {
            return false;
        }
        let mut search = st.search.load(SeqCst);
        if search == SEARCH_UNRESOLVED {
            let cx = self.tree.ctx();
            cx.hooks.fire(hooks::WFDELETE_BEFORE_RESOLVE);
            let l = leaf.as_leaf();
            let present = match l.list.find(st.key, g) {
                Ok((_, succ)) => {
                    let s = unsafe { succ.deref() };
                    s.key() == st.key && !is_tombstone(VersionedList::read_current(s, cx, g))
                }
                Err(_) => {
                    self.tree.freeze_leaf(leaf, g);
                    return false;
                }
            };
            search = self.resolve_search(st, present);
        }
        if search == SEARCH_ABSENT {
            return true;
        }
        self.wf_insert_leaf(leaf, st, may_merge, g)
    }

    /// The first registered slot after `from`, skipping `me`; `me` itself if it is alone.
    fn next_registered(&self, from: usize, me: usize) -> usize {
        let n = self.cfg.max_threads;
        (1..=n)
            .map(|d| (from + d) % n)
            .find(|&i| i != me && self.taken[i].load(Relaxed))
            .unwrap_or(me)
    }

    fn record_attempts(&self, n: u64) {
        self.counters.max_attempts.fetch_max(n, Relaxed);
    }
}

impl Drop for WfTree {
    fn drop(&mut self) {
        unsafe {
            let g = crossbeam_epoch::unprotected();
            for s in &self.slots {
                let p = s.load(Relaxed, g);
                drop(p.into_owned());
            }
        }
    }
}

/// A registered thread's access to a [`WfTree`]. Dropping it frees the slot.
pub struct Handle<'a> {
    t: &'a WfTree,
    tid: usize,
    phase: u64,
    help: HelpRecord,
}

impl Handle<'_> {
    pub fn tid(&self) -> usize {
        self.tid
    }

    pub fn help_record(&self) -> &HelpRecord {
        &self.help
    }

    pub fn insert(&mut self, key: Key, value: Value) -> Result<OpResult, Error> {
        self.insert_traced(key, value).map(|(r, _)| r)
    }

    pub fn insert_traced(&mut self, key: Key, value: Value) -> Result<(OpResult, Option<Timestamp>), Error> {
        check_key(key)?;
        check_value(value)?;
        Ok(self.execute(UpdateKind::Insert, key, value))
    }

    pub fn delete(&mut self, key: Key) -> Result<OpResult, Error> {
        self.delete_traced(key).map(|(r, _)| r)
    }

    pub fn delete_traced(&mut self, key: Key) -> Result<(OpResult, Option<Timestamp>), Error> {
        check_key(key)?;
        Ok(self.execute(UpdateKind::Delete, key, TOMBSTONE))
    }

    pub fn search(&mut self, key: Key) -> Result<Option<Value>, Error> {
        let r = self.t.tree.search(key);
        self.check_help();
        r
    }

    pub fn range_query(&mut self, low: Key, high: Key) -> Result<Vec<(Key, Value)>, Error> {
        self.range_query_traced(low, high).map(|(r, _)| r)
    }

    pub fn range_query_traced(&mut self, low: Key, high: Key) -> Result<(Vec<(Key, Value)>, Timestamp), Error> {
        let r = self.t.tree.range_query_traced(low, high);
        self.check_help();
        r
    }

    fn execute(&mut self, kind: UpdateKind, key: Key, value: Value) -> (OpResult, Option<Timestamp>) {
        let t = self.t;
        let tree = &t.tree;
        let hooks = &tree.ctx().hooks;
        let g = pin();
        let mut failures = 0u64;
        for _ in 0..t.cfg.fast_path_retries {
            let r = if hooks.fire(hooks::FAST_ATTEMPT) == HookAction::Fail {
                None
            } else {
                match kind {
                    UpdateKind::Insert => tree.try_insert(key, value, &g),
                    UpdateKind::Delete => tree.try_delete(key, &g),
                }
            };
            if let Some(u) = r {
                t.counters.fast_path_ops.add(1);
                t.record_attempts(failures);
                drop(g);
                self.check_help();
                let res = match kind {
                    UpdateKind::Insert => OpResult::for_insert(u.prior),
                    UpdateKind::Delete => OpResult::for_delete(u.prior),
                };
                return (res, u.ts);
            }
            failures += 1;
            tree.counters().restarts.add(1);
        }
        t.counters.slow_path_entries.add(1);
        self.phase += 1;
        let st = Owned::new(OperationState::new(self.phase, kind, key, value, &tree.ctx().stats));
        let st = t.slots[self.tid].swap(st, AcqRel, &g);
        unsafe {
            let _ = reclaim::retire(st, &g, &tree.ctx().stats);
        }
        hooks.fire(hooks::AFTER_ANNOUNCE);
        let st = t.state(self.tid, &g);
        failures += t.complete(st, true, &g);
        t.record_attempts(failures);
        let out = st.outcome();
        drop(g);
        self.check_help();
        out
    }

    /// Counts down one completed operation; every `helping_period` operations completes the
    /// pending announcement of the next slot in round-robin order, if any.
    pub fn check_help(&mut self) {
        let t = self.t;
        self.help.next_check = self.help.next_check.saturating_sub(1);
        if self.help.next_check > 0 {
            return;
        }
        self.help.next_check = t.cfg.helping_period;
        let g = pin();
        let target = self.help.curr_tid;
        if target != self.tid {
            let st = t.state(target, &g);
            let pending = !st.is_finished();
            if pending && self.help.last_phase.is_none_or(|p| p == st.phase) {
                t.counters.helped_ops.add(1);
                t.complete(st, false, &g);
            } else {
                t.counters.help_skips.add(1);
            }
        }
        let next = t.next_registered(target, self.tid);
        self.help.curr_tid = next;
        let st = t.state(next, &g);
        self.help.last_phase = (!st.is_finished()).then_some(st.phase);
    }
}

impl Drop for Handle<'_> {
    fn drop(&mut self) {
        self.t.taken[self.tid].store(false, Release);
    }
}

#[cfg(test)]
mod tests;
