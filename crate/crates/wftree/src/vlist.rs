//! Versioned lock-free sorted list: the contents of one leaf.
//!
//! Every key node keeps a chain of versions, newest first. A version's timestamp is fixed lazily
//! by the first thread that needs it ([`VersionedList::init_ts`]); that step is the update's
//! linearization point. Deleting writes a tombstone version, key nodes are never unlinked.
//! Freezing marks every `next` and `vhead` word so the list is immutable before its leaf is
//! replaced.
//!
//! A version announced by a wait-free operation is shared by all helpers. Its `nextv` word is
//! rewritten by helpers until one of them installs it, so that word carries a write counter next
//! to the address: a helper's compare-and-swap fails if anything was written since its read,
//! even if the same address came back.

use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed, SeqCst};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize};
use std::sync::Arc;

use crossbeam_epoch::{Atomic, Guard, Owned, Shared};
use portable_atomic::AtomicU128;

use crate::ctx::Ctx;
use crate::hooks;
use crate::reclaim::MemStats;
use crate::types::*;

#[inline]
fn pack(addr: usize, seq: u64) -> u128 {
    ((seq as u128) << 64) | addr as u64 as u128
}

#[inline]
fn addr_of(w: u128) -> usize {
    w as u64 as usize
}

#[inline]
fn seq_of(w: u128) -> u64 {
    (w >> 64) as u64
}

pub struct VersionNode {
    value: Value,
    ts: AtomicI64,
    nextv: AtomicU128,
    shared: bool,
    // Owners of a shared node: its announcement plus, once installed, its chain.
    refs: AtomicUsize,
}

impl VersionNode {
    fn alloc(value: Value, ts: Timestamp, older: *const VersionNode, stats: &MemStats) -> *mut Self {
        stats.version_nodes.add(1);
        Box::into_raw(Box::new(Self {
            value,
            ts: AtomicI64::new(ts),
            nextv: AtomicU128::new(pack(older as usize, 0)),
            shared: false,
            refs: AtomicUsize::new(0),
        }))
    }

    /// A version to be installed by whichever helper of an announced operation gets there first.
    pub(crate) fn alloc_shared(value: Value, stats: &MemStats) -> *mut Self {
        stats.version_nodes.add(1);
        Box::into_raw(Box::new(Self {
            value,
            ts: AtomicI64::new(TS_UNSET),
            nextv: AtomicU128::new(0),
            shared: true,
            refs: AtomicUsize::new(1),
        }))
    }

    pub fn value(&self) -> Value {
        self.value
    }

    pub fn ts(&self) -> Timestamp {
        self.ts.load(SeqCst)
    }

    pub fn older(&self) -> *const VersionNode {
        addr_of(self.nextv.load(SeqCst)) as *const VersionNode
    }

    pub(crate) fn nextv_word(&self) -> u128 {
        self.nextv.load(SeqCst)
    }

    /// Drops one owner; frees the node when it was the last.
    ///
    /// # Safety
    /// `p` must be live and the caller must own one reference (a chain or an announcement).
    pub(crate) unsafe fn release(p: *const VersionNode, stats: &MemStats) {
        let n = &*p;
        if !n.shared || n.refs.fetch_sub(1, AcqRel) == 1 {
            stats.version_nodes.sub(1);
            drop(Box::from_raw(p as *mut VersionNode));
        }
    }
}

/// Releases a whole chain starting at `p`.
unsafe fn release_chain(mut p: *const VersionNode, stats: &MemStats) {
    while !p.is_null() {
        let older = (*p).older();
        VersionNode::release(p, stats);
        p = older;
    }
}

pub struct KeyNode {
    key: Key,
    vhead: MarkedLink<VersionNode>,
    next: MarkedLink<KeyNode>,
}

impl KeyNode {
    fn alloc(key: Key, vhead: *const VersionNode, stats: &MemStats) -> Owned<Self> {
        stats.key_nodes.add(1);
        Owned::new(Self {
            key,
            vhead: Atomic::from(vhead),
            next: Atomic::null(),
        })
    }

    pub fn key(&self) -> Key {
        self.key
    }

    /// Newest version, ignoring the freezing mark.
    pub fn head<'g>(&self, g: &'g Guard) -> Shared<'g, VersionNode> {
        unmark(self.vhead.load(Acquire, g))
    }
}

/// The list hit a frozen word; the leaf must be replaced before retrying.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frozen;

/// Outcome of a lock-free list update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ListUpdate {
    /// Value at the head before the update; `None` when a new key node was linked.
    pub prior: Option<Value>,
    /// Timestamp of the installed version; `None` when the head already held the value.
    pub ts: Option<Timestamp>,
}

/// What a wait-free list routine needs from an announced operation.
pub struct Announcement<'a> {
    pub vnode: &'a VersionNode,
    pub finished: &'a AtomicBool,
}

impl Announcement<'_> {
    fn is_finished(&self) -> bool {
        self.finished.load(SeqCst)
    }

    fn finish(&self) {
        self.finished.store(true, SeqCst);
    }

    fn vnode_ptr(&self) -> *const VersionNode {
        self.vnode as *const VersionNode
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WfOutcome {
    /// This call installed the shared version.
    Installed,
    /// The operation was already complete.
    Finished,
    Failed,
}

enum Vcas {
    Installed(Timestamp),
    Unchanged,
    Lost,
}

/// A key and its kept versions, newest first: the unit copied between leaves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: Key,
    pub versions: Vec<(Value, Timestamp)>,
}

impl Entry {
    pub fn latest(&self) -> Value {
        self.versions[0].0
    }
}

pub struct VersionedList {
    head: Atomic<KeyNode>,
    stats: Arc<MemStats>,
}

unsafe impl Send for VersionedList {}
unsafe impl Sync for VersionedList {}

impl VersionedList {
    pub fn new(stats: Arc<MemStats>) -> Self {
        Self::from_entries(&[], stats)
    }

    /// Builds an unpublished list holding `entries` (sorted by key, distinct).
    pub fn from_entries(entries: &[Entry], stats: Arc<MemStats>) -> Self {
        let g = unsafe { crossbeam_epoch::unprotected() };
        let mut next = KeyNode::alloc(KEY_POS_INF, std::ptr::null(), &stats).into_shared(g);
        for e in entries.iter().rev() {
            debug_assert!(!e.versions.is_empty());
            let mut older: *const VersionNode = std::ptr::null();
            for &(v, ts) in e.versions.iter().rev() {
                older = VersionNode::alloc(v, ts, older, &stats);
            }
            let kn = KeyNode::alloc(e.key, older, &stats);
            kn.next.store(next, Relaxed);
            next = kn.into_shared(g);
        }
        let head = KeyNode::alloc(KEY_NEG_INF, std::ptr::null(), &stats);
        head.next.store(next, Relaxed);
        Self {
            head: Atomic::from(head.into_shared(g)),
            stats,
        }
    }

    fn head<'g>(&self, g: &'g Guard) -> &'g KeyNode {
        unsafe { self.head.load(Relaxed, g).deref() }
    }

    /// First node with key ≥ `key` and its predecessor, or `Frozen` on a marked `next`.
    pub fn find<'g>(&self, key: Key, g: &'g Guard) -> Result<(Shared<'g, KeyNode>, Shared<'g, KeyNode>), Frozen> {
        let mut pred = self.head.load(Relaxed, g);
        loop {
            let curr = unsafe { pred.deref() }.next.load(Acquire, g);
            if is_marked(curr) {
                return Err(Frozen);
            }
            if unsafe { curr.deref() }.key >= key {
                return Ok((pred, curr));
            }
            pred = curr;
        }
    }

    /// First node with key ≥ `key`, ignoring freezing marks. For readers.
    pub fn find_unchecked<'g>(&self, key: Key, g: &'g Guard) -> &'g KeyNode {
        let mut curr = unmark(self.head(g).next.load(Acquire, g));
        loop {
            let c = unsafe { curr.deref() };
            if c.key >= key {
                return c;
            }
            curr = unmark(c.next.load(Acquire, g));
        }
    }

    pub fn init_ts(v: &VersionNode, cx: &Ctx, g: &Guard) {
        if v.ts.load(SeqCst) == TS_UNSET {
            let t = cx.tracker.current_ts(g);
            let _ = v.ts.compare_exchange(TS_UNSET, t, SeqCst, SeqCst);
        }
    }

    /// Value of the newest version, after fixing its timestamp. May be `TOMBSTONE`.
    pub fn read_current(n: &KeyNode, cx: &Ctx, g: &Guard) -> Value {
        let h = unsafe { n.head(g).deref() };
        Self::init_ts(h, cx, g);
        debug_assert_ne!(h.ts(), TS_UNSET);
        h.value
    }

    /// Value of the newest version with timestamp ≤ `t`.
    pub fn read_at(n: &KeyNode, t: Timestamp, cx: &Ctx, g: &Guard) -> Option<Value> {
        let mut p = n.head(g).as_raw();
        while let Some(v) = unsafe { p.as_ref() } {
            Self::init_ts(v, cx, g);
            debug_assert_ne!(v.ts(), TS_UNSET);
            if v.ts() <= t {
                return Some(v.value);
            }
            p = v.older();
        }
        None
    }

    fn vcas(&self, n: &KeyNode, old: Value, new: Value, cx: &Ctx, g: &Guard) -> Vcas {
        let cur = n.vhead.load(Acquire, g);
        let c = unsafe { unmark(cur).deref() };
        Self::init_ts(c, cx, g);
        if c.value != old {
            return Vcas::Lost;
        }
        if c.value == new {
            return Vcas::Unchanged;
        }
        if is_marked(cur) {
            return Vcas::Lost;
        }
        let nv = VersionNode::alloc(new, TS_UNSET, cur.as_raw(), &self.stats);
        match n
            .vhead
            .compare_exchange(cur, Shared::from(nv as *const _), AcqRel, Acquire, g)
        {
            Ok(_) => {
                let v = unsafe { &*nv };
                Self::init_ts(v, cx, g);
                Vcas::Installed(v.ts())
            }
            Err(e) => {
                unsafe { VersionNode::release(nv, &self.stats) };
                if let Some(w) = unsafe { unmark(e.current).as_ref() } {
                    Self::init_ts(w, cx, g);
                }
                Vcas::Lost
            }
        }
    }

    /// Installs `new` on `n` if the newest value is `old`. True also when it already is `new`.
    pub fn version_cas(&self, n: &KeyNode, old: Value, new: Value, cx: &Ctx, g: &Guard) -> bool {
        !matches!(self.vcas(n, old, new, cx, g), Vcas::Lost)
    }

    /// Installs the shared `vnode` on top of `observed`, first pointing `vnode.nextv` at it.
    ///
    /// `expected_nextv` is the `nextv` word read before `observed` was loaded; if any helper
    /// wrote `nextv` since, this returns false without touching `vhead`.
    #[allow(clippy::too_many_arguments)]
    pub fn wf_version_cas(
        &self,
        n: &KeyNode,
        old: Value,
        vnode: &VersionNode,
        expected_nextv: u128,
        observed: Shared<'_, VersionNode>,
        cx: &Ctx,
        g: &Guard,
    ) -> bool {
        let o = unsafe { unmark(observed).deref() };
        Self::init_ts(o, cx, g);
        if o.value != old {
            return false;
        }
        cx.hooks.fire(hooks::WFVCAS_BEFORE_NEXTV_CAS);
        let linked = pack(observed.as_raw() as usize, seq_of(expected_nextv) + 1);
        if vnode
            .nextv
            .compare_exchange(expected_nextv, linked, SeqCst, SeqCst)
            .is_err()
        {
            return false;
        }
        cx.hooks.fire(hooks::WFVCAS_BEFORE_VHEAD_CAS);
        let vp = Shared::from(vnode as *const VersionNode);
        match n.vhead.compare_exchange(observed, vp, AcqRel, Acquire, g) {
            Ok(_) => {
                Self::init_ts(vnode, cx, g);
                true
            }
            Err(e) => {
                if let Some(w) = unsafe { unmark(e.current).as_ref() } {
                    Self::init_ts(w, cx, g);
                }
                false
            }
        }
    }

    /// Lock-free insert or update; `value` may be `TOMBSTONE` on the delete path.
    pub fn insert(&self, key: Key, value: Value, cx: &Ctx, g: &Guard) -> Result<ListUpdate, Frozen> {
        loop {
            let (pred, succ) = self.find(key, g)?;
            let s = unsafe { succ.deref() };
            if s.key == key {
                loop {
                    if is_marked(s.vhead.load(Acquire, g)) {
                        return Err(Frozen);
                    }
                    let cur = Self::read_current(s, cx, g);
                    match self.vcas(s, cur, value, cx, g) {
                        Vcas::Installed(ts) => {
                            return Ok(ListUpdate {
                                prior: Some(cur),
                                ts: Some(ts),
                            })
                        }
                        Vcas::Unchanged => {
                            return Ok(ListUpdate {
                                prior: Some(cur),
                                ts: None,
                            })
                        }
                        Vcas::Lost => {}
                    }
                }
            }
            let vn = VersionNode::alloc(value, TS_UNSET, std::ptr::null(), &self.stats);
            let kn = KeyNode::alloc(key, vn, &self.stats);
            kn.next.store(succ, Relaxed);
            let p = unsafe { pred.deref() };
            match p.next.compare_exchange(succ, kn, AcqRel, Acquire, g) {
                Ok(_) => {
                    let v = unsafe { &*vn };
                    Self::init_ts(v, cx, g);
                    return Ok(ListUpdate {
                        prior: None,
                        ts: Some(v.ts()),
                    });
                }
                Err(e) => {
                    drop(e.new);
                    self.stats.key_nodes.sub(1);
                    unsafe { VersionNode::release(vn, &self.stats) };
                }
            }
        }
    }

    /// Installs the announced version for `key` exactly once across all helpers.
    pub fn wf_insert(&self, key: Key, ann: &Announcement<'_>, cx: &Ctx, g: &Guard) -> WfOutcome {
        let vn = ann.vnode;
        loop {
            if ann.is_finished() {
                return WfOutcome::Finished;
            }
            let Ok((pred, succ)) = self.find(key, g) else {
                return WfOutcome::Failed;
            };
            let s = unsafe { succ.deref() };
            if s.key == key {
                loop {
                    if ann.is_finished() {
                        return WfOutcome::Finished;
                    }
                    // nextv before vhead: see wf_version_cas.
                    let nextv = vn.nextv_word();
                    let cur = s.vhead.load(Acquire, g);
                    if is_marked(cur) {
                        return WfOutcome::Failed;
                    }
                    let c = unsafe { cur.deref() };
                    Self::init_ts(c, cx, g);
                    if cur.as_raw() == ann.vnode_ptr() || vn.ts() != TS_UNSET {
                        ann.finish();
                        return WfOutcome::Finished;
                    }
                    cx.hooks.fire(hooks::WFINSERT_BEFORE_WFVCAS);
                    if self.wf_version_cas(s, c.value, vn, nextv, cur, cx, g) {
                        vn.refs.fetch_add(1, AcqRel);
                        ann.finish();
                        return WfOutcome::Installed;
                    }
                }
            }
            if vn.ts() != TS_UNSET {
                ann.finish();
                return WfOutcome::Finished;
            }
            let w = vn.nextv_word();
            // Key still absent and the leaf not frozen after reading `w`: no helper can be
            // between its nextv and vhead swaps on a live node for this key.
            let p = unsafe { pred.deref() };
            if p.next.load(Acquire, g) != succ {
                continue;
            }
            if vn
                .nextv
                .compare_exchange(w, pack(0, seq_of(w) + 1), SeqCst, SeqCst)
                .is_err()
            {
                continue;
            }
            cx.hooks.fire(hooks::WFINSERT_BEFORE_LINK);
            let kn = KeyNode::alloc(key, ann.vnode_ptr(), &self.stats);
            kn.next.store(succ, Relaxed);
            match p.next.compare_exchange(succ, kn, AcqRel, Acquire, g) {
                Ok(_) => {
                    vn.refs.fetch_add(1, AcqRel);
                    cx.hooks.fire(hooks::WFINSERT_AFTER_LINK);
                    Self::init_ts(vn, cx, g);
                    ann.finish();
                    return WfOutcome::Installed;
                }
                Err(e) => {
                    // The shared version stays owned by the announcement.
                    drop(e.new);
                    self.stats.key_nodes.sub(1);
                }
            }
        }
    }

    /// Marks every `next` then `vhead` word from the head. Idempotent, safe to run concurrently.
    pub fn freeze(&self, g: &Guard) {
        let mut curr = self.head.load(Relaxed, g);
        loop {
            let c = unsafe { curr.deref() };
            let next = unmark(c.next.fetch_or(MARK, SeqCst, g));
            if next.is_null() {
                return;
            }
            c.vhead.fetch_or(MARK, SeqCst, g);
            curr = next;
        }
    }

    pub fn is_frozen(&self, g: &Guard) -> bool {
        is_marked(self.head(g).next.load(Acquire, g))
    }

    /// Iterates user key nodes, ignoring marks.
    pub fn iter<'g>(&self, g: &'g Guard) -> impl Iterator<Item = &'g KeyNode> + 'g {
        let mut curr = unmark(self.head(g).next.load(Acquire, g));
        std::iter::from_fn(move || {
            let c = unsafe { curr.deref() };
            if c.key == KEY_POS_INF {
                return None;
            }
            curr = unmark(c.next.load(Acquire, g));
            Some(c)
        })
    }

    /// Number of key nodes, live or tombstoned.
    pub fn size(&self, g: &Guard) -> usize {
        self.iter(g).count()
    }

    /// Appends the pairs visible at `t` with `low ≤ key ≤ high`. Returns true once a key above
    /// `high` is seen, meaning no later leaf can contribute.
    pub fn collect_range(
        &self,
        low: Key,
        high: Key,
        t: Timestamp,
        out: &mut Vec<(Key, Value)>,
        cx: &Ctx,
        g: &Guard,
    ) -> bool {
        for n in self.iter(g) {
            if n.key > high {
                return true;
            }
            if n.key < low || out.last().is_some_and(|&(k, _)| k >= n.key) {
                continue;
            }
            if let Some(v) = Self::read_at(n, t, cx, g) {
                if !is_tombstone(v) {
                    out.push((n.key, v));
                }
            }
        }
        false
    }

    /// Versions that must survive a copy: all newer than `min_active`, plus the newest older
    /// one. Trailing tombstones read the same as no version and are dropped, as are keys left
    /// with nothing.
    pub fn entries(&self, min_active: Timestamp, cx: &Ctx, g: &Guard) -> Vec<Entry> {
        let mut out = Vec::new();
        for n in self.iter(g) {
            let mut versions = Vec::new();
            let mut p = n.head(g).as_raw();
            while let Some(v) = unsafe { p.as_ref() } {
                Self::init_ts(v, cx, g);
                versions.push((v.value, v.ts()));
                if v.ts() < min_active {
                    break;
                }
                p = v.older();
            }
            while versions.last().is_some_and(|&(v, _)| is_tombstone(v)) {
                versions.pop();
            }
            if !versions.is_empty() {
                out.push(Entry { key: n.key, versions });
            }
        }
        out
    }

    /// Current (key, value) pairs, tombstones excluded.
    pub fn current(&self, cx: &Ctx, g: &Guard) -> Vec<(Key, Value)> {
        self.iter(g)
            .map(|n| (n.key, Self::read_current(n, cx, g)))
            .filter(|&(_, v)| !is_tombstone(v))
            .collect()
    }

    pub fn keys(&self, g: &Guard) -> Vec<Key> {
        self.iter(g).map(|n| n.key).collect()
    }

    /// Checks ascending keys and non-increasing set timestamps along every chain.
    pub fn check(&self, g: &Guard) -> Result<(), String> {
        let mut last = KEY_NEG_INF;
        for n in self.iter(g) {
            if n.key <= last {
                return Err(format!("keys out of order: {last} then {}", n.key));
            }
            last = n.key;
            if n.head(g).is_null() {
                return Err(format!("key {} has no version", n.key));
            }
            let mut prev_ts = Timestamp::MAX;
            let mut p = n.head(g).as_raw();
            while let Some(v) = unsafe { p.as_ref() } {
                let t = v.ts();
                if t != TS_UNSET {
                    if t > prev_ts {
                        return Err(format!("key {}: version ts {t} after {prev_ts}", n.key));
                    }
                    prev_ts = t;
                }
                p = v.older();
            }
        }
        Ok(())
    }

    /// How many times `v` occurs across all version chains.
    pub fn occurrences(&self, v: *const VersionNode, g: &Guard) -> usize {
        let mut count = 0;
        for n in self.iter(g) {
            let mut p = n.head(g).as_raw();
            while !p.is_null() {
                count += (p == v) as usize;
                p = unsafe { (*p).older() };
            }
        }
        count
    }

    /// Total versions across all chains.
    pub fn version_count(&self, g: &Guard) -> usize {
        let mut count = 0;
        for n in self.iter(g) {
            let mut p = n.head(g).as_raw();
            while !p.is_null() {
                count += 1;
                p = unsafe { (*p).older() };
            }
        }
        count
    }
}

impl Drop for VersionedList {
    fn drop(&mut self) {
        unsafe {
            let g = crossbeam_epoch::unprotected();
            let mut curr = unmark(self.head.load(Relaxed, g));
            while !curr.is_null() {
                let c = curr.deref();
                let next = unmark(c.next.load(Relaxed, g));
                release_chain(c.head(g).as_raw(), &self.stats);
                drop(curr.into_owned());
                self.stats.key_nodes.sub(1);
                curr = next;
            }
        }
    }
}
