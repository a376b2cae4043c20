//! Tree nodes and replacement plans.
//!
//! Internal nodes are immutable after publication except for `help_idx` and the marks on their
//! child links; any structural change copies them. Leaves wrap a [`VersionedList`] plus the
//! `next` / `new_next` links used by range scans.
//!
//! A replaced leaf can stay reachable through the `next` link of a neighbour built earlier, so
//! leaves are reference counted: one reference for the tree link (dropped one grace period after
//! retirement) plus one per `next` or `new_next` link pointing at it.

use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed, SeqCst};
use std::sync::atomic::{AtomicBool, AtomicIsize, AtomicUsize};
use std::sync::Arc;

use crossbeam_epoch::{Atomic, Guard, Shared};

use crate::reclaim::{DoubleRetire, MemStats};
use crate::types::*;
use crate::vlist::{Entry, VersionedList};

/// `help_idx` value of a node frozen for its own replacement rather than to rebalance a child.
pub const NO_HELP: isize = -2;
pub const HELP_UNSET: isize = -1;

pub struct Node {
    frozen: AtomicBool,
    retired: AtomicBool,
    // One-shot replacement content: for an internal node with a help target, or a frozen root leaf.
    plan: Atomic<Plan>,
    stats: Arc<MemStats>,
    pub(crate) kind: Kind,
}

pub enum Kind {
    Leaf(Leaf),
    Internal(Internal),
}

pub struct Leaf {
    pub list: VersionedList,
    count: AtomicUsize,
    live: AtomicIsize,
    updates: AtomicUsize,
    next: Atomic<Node>,
    new_next: Atomic<Node>,
    ts: Timestamp,
    refs: AtomicUsize,
}

pub struct Internal {
    keys: Vec<Key>,
    children: Vec<MarkedLink<Node>>,
    help_idx: AtomicIsize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rebalance {
    Split,
    Merge,
    Borrow,
    Copy,
}

/// Content of a frozen node's replacement, agreed on by compare-and-swap so that every helper
/// installs the same children and each replaced leaf gets exactly one `new_next`.
pub struct Plan {
    pub kind: Rebalance,
    pub keys: Vec<Key>,
    pub children: Vec<*const Node>,
    /// Nodes allocated for this plan; freed if the plan loses the claim.
    pub created: Vec<*const Node>,
    /// Nodes, other than the planned node itself, unlinked when the plan is installed.
    pub replaced: Vec<*const Node>,
    pub new_next: Vec<(*const Node, *const Node)>,
}

unsafe impl Send for Plan {}
unsafe impl Sync for Plan {}

impl Plan {
    /// Frees the nodes of a plan that was never claimed.
    ///
    /// # Safety
    /// The plan must not be reachable by other threads.
    pub unsafe fn discard(self) {
        for &n in &self.created {
            free_unpublished(n);
        }
    }
}

/// Frees a node that was never published.
///
/// # Safety
/// `n` must be unreachable by other threads.
pub unsafe fn free_unpublished(n: *const Node) {
    match &(*n).kind {
        Kind::Leaf(_) => release_leaf(n),
        Kind::Internal(_) => drop(Box::from_raw(n as *mut Node)),
    }
}

impl Node {
    fn alloc(kind: Kind, stats: &Arc<MemStats>) -> *mut Node {
        Box::into_raw(Box::new(Node {
            frozen: AtomicBool::new(false),
            retired: AtomicBool::new(false),
            plan: Atomic::null(),
            stats: stats.clone(),
            kind,
        }))
    }

    /// New leaf holding `entries`; takes a reference on `next`.
    pub(crate) fn leaf(entries: &[Entry], ts: Timestamp, next: *const Node, stats: &Arc<MemStats>) -> *mut Node {
        stats.leaves.add(1);
        if let Some(n) = unsafe { next.as_ref() } {
            n.as_leaf().refs.fetch_add(1, AcqRel);
        }
        Self::alloc(
            Kind::Leaf(Leaf {
                list: VersionedList::from_entries(entries, stats.clone()),
                count: AtomicUsize::new(entries.len()),
                live: AtomicIsize::new(entries.iter().filter(|e| !is_tombstone(e.latest())).count() as isize),
                updates: AtomicUsize::new(0),
                next: Atomic::from(next),
                new_next: Atomic::null(),
                ts,
                refs: AtomicUsize::new(1),
            }),
            stats,
        )
    }

    pub fn internal(keys: Vec<Key>, children: &[*const Node], stats: &Arc<MemStats>) -> *mut Node {
        debug_assert_eq!(keys.len() + 1, children.len());
        stats.internals.add(1);
        Self::alloc(
            Kind::Internal(Internal {
                keys,
                children: children.iter().map(|&c| Atomic::from(c)).collect(),
                help_idx: AtomicIsize::new(HELP_UNSET),
            }),
            stats,
        )
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, Kind::Leaf(_))
    }

    pub fn as_leaf(&self) -> &Leaf {
        match &self.kind {
            Kind::Leaf(l) => l,
            Kind::Internal(_) => panic!("internal node used as leaf"),
        }
    }

    pub fn as_internal(&self) -> &Internal {
        match &self.kind {
            Kind::Internal(i) => i,
            Kind::Leaf(_) => panic!("leaf used as internal node"),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(SeqCst)
    }

    pub(crate) fn set_frozen(&self) {
        self.frozen.store(true, SeqCst);
    }

    pub(crate) fn plan<'g>(&self, g: &'g Guard) -> Option<&'g Plan> {
        unsafe { self.plan.load(Acquire, g).as_ref() }
    }

    /// Claims the plan slot; returns the plan that ended up in it and whether it is ours.
    pub(crate) fn claim_plan<'g>(&self, cand: Plan, g: &'g Guard) -> (&'g Plan, bool) {
        let owned = crossbeam_epoch::Owned::new(cand);
        match self.plan.compare_exchange(Shared::null(), owned, AcqRel, Acquire, g) {
            Ok(p) => (unsafe { p.deref() }, true),
            Err(e) => {
                unsafe { (*e.new.into_box()).discard() };
                (unsafe { e.current.deref() }, false)
            }
        }
    }

    pub(crate) fn mark_retired(&self) -> Result<(), DoubleRetire> {
        if self.retired.swap(true, AcqRel) {
            Err(DoubleRetire)
        } else {
            self.stats.retired.add(1);
            Ok(())
        }
    }

    pub fn is_retired(&self) -> bool {
        self.retired.load(Acquire)
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        unsafe {
            let g = crossbeam_epoch::unprotected();
            let p = self.plan.load(Relaxed, g);
            if !p.is_null() {
                drop(p.into_owned());
            }
        }
        match self.kind {
            Kind::Leaf(_) => self.stats.leaves.sub(1),
            Kind::Internal(_) => self.stats.internals.sub(1),
        }
    }
}

/// Drops one reference to leaf `n`, freeing it (and releasing what it links to) at zero.
///
/// # Safety
/// The caller must own one reference, and at zero no thread may still reach the leaf.
pub unsafe fn release_leaf(n: *const Node) {
    let mut stack = vec![n];
    while let Some(p) = stack.pop() {
        let l = (*p).as_leaf();
        if l.refs.fetch_sub(1, AcqRel) == 1 {
            let g = crossbeam_epoch::unprotected();
            let next = l.next.load(Relaxed, g).as_raw();
            let nn = l.new_next.load(Relaxed, g).as_raw();
            drop(Box::from_raw(p as *mut Node));
            stack.extend([next, nn].into_iter().filter(|q| !q.is_null()));
        }
    }
}

impl Leaf {
    pub fn ts(&self) -> Timestamp {
        self.ts
    }

    pub fn count(&self) -> usize {
        self.count.load(Relaxed)
    }

    pub(crate) fn set_count(&self, n: usize) {
        self.count.store(n, Relaxed);
    }

    pub(crate) fn bump_count(&self) {
        self.count.fetch_add(1, Relaxed);
    }

    /// Keys whose latest version is not a tombstone (a hint, like `count`).
    pub fn live(&self) -> isize {
        self.live.load(Relaxed)
    }

    pub(crate) fn add_live(&self, d: isize) -> isize {
        self.live.fetch_add(d, Relaxed) + d
    }

    pub fn updates(&self) -> usize {
        self.updates.load(Relaxed)
    }

    pub(crate) fn bump_updates(&self) {
        self.updates.fetch_add(1, Relaxed);
    }

    pub fn next<'g>(&self, g: &'g Guard) -> Shared<'g, Node> {
        self.next.load(Acquire, g)
    }

    pub fn new_next<'g>(&self, g: &'g Guard) -> Shared<'g, Node> {
        self.new_next.load(Acquire, g)
    }

    /// One-shot link to this leaf's replacement.
    pub(crate) fn set_new_next(&self, target: *const Node, g: &Guard) -> bool {
        let t = Shared::from(target);
        if self
            .new_next
            .compare_exchange(Shared::null(), t, AcqRel, Acquire, g)
            .is_ok()
        {
            unsafe { (*target).as_leaf().refs.fetch_add(1, AcqRel) };
            true
        } else {
            false
        }
    }

    /// Optional scan shortcut: repoints `next` from a replaced leaf to its replacement.
    pub(crate) fn repair_next(&self, old: Shared<'_, Node>, new: Shared<'_, Node>, g: &Guard) {
        let nl = unsafe { new.deref() }.as_leaf();
        nl.refs.fetch_add(1, AcqRel);
        if self.next.compare_exchange(old, new, AcqRel, Acquire, g).is_ok() {
            let old = old.as_raw() as usize;
            unsafe { g.defer_unchecked(move || release_leaf(old as *const Node)) };
        } else {
            unsafe { release_leaf(new.as_raw()) };
        }
    }
}

impl Internal {
    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.children.len()
    }

    /// Child index for `key`; a key equal to a separator goes right.
    pub fn route(&self, key: Key) -> usize {
        self.keys.partition_point(|&k| k <= key)
    }

    pub fn child<'g>(&self, i: usize, g: &'g Guard) -> Shared<'g, Node> {
        unmark(self.children[i].load(Acquire, g))
    }

    pub(crate) fn child_link(&self, i: usize) -> &MarkedLink<Node> {
        &self.children[i]
    }

    pub fn children(&self, g: &Guard) -> Vec<*const Node> {
        (0..self.children.len()).map(|i| self.child(i, g).as_raw()).collect()
    }

    pub fn help_idx(&self) -> isize {
        self.help_idx.load(SeqCst)
    }

    /// One-shot: true iff this call moved `help_idx` from unset to `cidx`.
    pub fn set_help_idx(&self, cidx: usize) -> bool {
        self.help_idx
            .compare_exchange(HELP_UNSET, cidx as isize, SeqCst, SeqCst)
            .is_ok()
    }

    pub(crate) fn claim_no_help(&self) {
        let _ = self.help_idx.compare_exchange(HELP_UNSET, NO_HELP, SeqCst, SeqCst);
    }

    pub(crate) fn mark_children(&self, g: &Guard) {
        for c in &self.children {
            c.fetch_or(MARK, SeqCst, g);
        }
    }

    pub fn all_marked(&self, g: &Guard) -> bool {
        self.children.iter().all(|c| is_marked(c.load(Acquire, g)))
    }
}
