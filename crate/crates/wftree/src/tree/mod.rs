//! B+tree index over versioned-list leaves.
//!
//! Updates descend from the root and fix every threshold violation they meet on the way down,
//! so a rebalance never has to climb back up. A node that needs work is frozen and replaced by
//! a fresh copy; every thread that reaches a frozen node helps finish the replacement.
//! Searches and range queries never rebalance and never restart.

mod node;
mod rebalance;
mod validate;

use std::collections::HashSet;
use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed};

use crossbeam_epoch::{Atomic, Guard, Shared};

pub use node::{Internal, Kind, Leaf, Node, Rebalance};
pub use validate::{StructureReport, TreeStats};

use crate::ctx::Ctx;
use crate::hooks;
use crate::reclaim::{pin, Counter};
use crate::types::*;
use crate::vlist::{ListUpdate, VersionedList};
use node::{free_unpublished, release_leaf, NO_HELP};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeConfig {
    /// Separator keys at which an internal node is split.
    pub max_keys: usize,
    pub min_keys: usize,
    /// Key nodes at which a leaf is frozen and split.
    pub leaf_max: usize,
    /// A frozen leaf with fewer live keys is merged with or borrows from a sibling.
    pub leaf_min: usize,
    /// Updates a leaf accepts before it is frozen and copied, pruning dead versions.
    /// Zero disables the budget.
    pub update_budget: usize,
    /// Let range queries repoint a stale `next` link at the replacement they followed.
    pub rq_repair: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self::with_sizes(32, 8, 32, 8)
    }
}

impl TreeConfig {
    pub fn with_sizes(max_keys: usize, min_keys: usize, leaf_max: usize, leaf_min: usize) -> Self {
        Self {
            max_keys,
            min_keys,
            leaf_max,
            leaf_min,
            update_budget: 2 * leaf_max,
            rq_repair: false,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.min_keys < 2 || self.max_keys < 2 * self.min_keys {
            return Err(Error::Config(format!(
                "need max_keys >= 2 * min_keys >= 4, got {} and {}",
                self.max_keys, self.min_keys
            )));
        }
        if self.leaf_min < 2 || self.leaf_max < 2 * self.leaf_min {
            return Err(Error::Config(format!(
                "need leaf_max >= 2 * leaf_min >= 4, got {} and {}",
                self.leaf_max, self.leaf_min
            )));
        }
        Ok(())
    }

    /// Internal nodes with at most this many keys are merged on the way down. Kept below half
    /// of `max_keys` so the halves of a split are never immediately merged again.
    pub fn merge_at(&self) -> usize {
        self.min_keys.min(((self.max_keys - 1) / 2).saturating_sub(1))
    }
}

#[derive(Default, Debug)]
pub struct TreeCounters {
    /// Update attempts abandoned and restarted from the root.
    pub restarts: Counter,
    pub splits: Counter,
    pub merges: Counter,
    pub borrows: Counter,
    pub copies: Counter,
    /// Replacements finished for a node whose `help_idx` another thread set.
    pub helps: Counter,
    /// Restarts of point searches. Searches descend once, so this stays zero.
    pub search_restarts: Counter,
    /// Passes that met a second violation at a level they had already rebalanced and restarted
    /// rather than rebalance twice.
    pub locality_deferrals: Counter,
}

pub(crate) enum Located<'g> {
    /// The leaf, and whether it has a parent (it is not the root).
    Leaf(&'g Node, bool),
    /// No root yet and the caller asked not to create one.
    Empty,
    Retry,
}

pub struct Tree {
    root: Atomic<Node>,
    cfg: TreeConfig,
    cx: Ctx,
    counters: TreeCounters,
}

impl Default for Tree {
    fn default() -> Self {
        Self::new()
    }
}

impl Tree {
    pub fn new() -> Self {
        Self::with_config(TreeConfig::default()).expect("default config is valid")
    }

    pub fn with_config(cfg: TreeConfig) -> Result<Self, Error> {
        cfg.validate()?;
        Ok(Self {
            root: Atomic::null(),
            cfg,
            cx: Ctx::new(),
            counters: TreeCounters::default(),
        })
    }

    pub fn config(&self) -> &TreeConfig {
        &self.cfg
    }

    pub fn ctx(&self) -> &Ctx {
        &self.cx
    }

    pub fn counters(&self) -> &TreeCounters {
        &self.counters
    }

    pub fn insert(&self, key: Key, value: Value) -> Result<OpResult, Error> {
        self.insert_traced(key, value).map(|(r, _)| r)
    }

    /// Insert that also returns the timestamp of the version it installed, if any.
    pub fn insert_traced(&self, key: Key, value: Value) -> Result<(OpResult, Option<Timestamp>), Error> {
        check_key(key)?;
        check_value(value)?;
        let g = pin();
        loop {
            if let Some(u) = self.try_insert(key, value, &g) {
                return Ok((OpResult::for_insert(u.prior), u.ts));
            }
            self.counters.restarts.add(1);
        }
    }

    pub fn delete(&self, key: Key) -> Result<OpResult, Error> {
        self.delete_traced(key).map(|(r, _)| r)
    }

    /// Delete that also returns the timestamp of the tombstone it installed, if any.
    pub fn delete_traced(&self, key: Key) -> Result<(OpResult, Option<Timestamp>), Error> {
        check_key(key)?;
        let g = pin();
        loop {
            if let Some(u) = self.try_delete(key, &g) {
                return Ok((OpResult::for_delete(u.prior), u.ts));
            }
            self.counters.restarts.add(1);
        }
    }

    /// One lock-free insert attempt; `None` means restart.
    pub(crate) fn try_insert(&self, key: Key, value: Value, g: &Guard) -> Option<ListUpdate> {
        match self.locate(key, true, g) {
            Located::Leaf(l, _) => self.insert_leaf(l, key, value, false, g),
            _ => None,
        }
    }

    /// One lock-free delete attempt; `None` means restart.
    pub(crate) fn try_delete(&self, key: Key, g: &Guard) -> Option<ListUpdate> {
        match self.locate(key, false, g) {
            Located::Leaf(l, has_parent) => self.delete_leaf(l, key, has_parent, g),
            Located::Empty => Some(ListUpdate { prior: None, ts: None }),
            Located::Retry => None,
        }
    }

    fn needs_rebalance(&self, parent: &Internal, child: &Node) -> bool {
        match &child.kind {
            Kind::Leaf(_) => child.is_frozen(),
            Kind::Internal(c) => c.len() >= self.cfg.max_keys || (c.len() <= self.cfg.merge_at() && !parent.is_empty()),
        }
    }

    /// One descent towards the leaf for `key`, helping and rebalancing on the way.
    pub(crate) fn locate<'g>(&self, key: Key, create: bool, g: &'g Guard) -> Located<'g> {
        let root = self.root.load(Acquire, g);
        if root.is_null() {
            if !create {
                return Located::Empty;
            }
            let leaf = Node::leaf(&[], self.cx.tracker.current_ts(g), std::ptr::null(), &self.cx.stats);
            if self
                .root
                .compare_exchange(Shared::null(), Shared::from(leaf as *const Node), AcqRel, Acquire, g)
                .is_err()
            {
                unsafe { release_leaf(leaf) };
            }
            return Located::Retry;
        }
        let Some(mut curr) = self.balance_root(root, g) else {
            return Located::Retry;
        };
        let mut prev: Option<(&Node, usize)> = None;
        // Left neighbour of `curr` on its level, if known.
        let mut left: Option<&'g Node> = None;
        // Whether this pass already rebalanced a child of the current level.
        let mut rebalanced = false;
        loop {
            let cn: &'g Node = unsafe { curr.deref() };
            let Kind::Internal(ci) = &cn.kind else {
                if let Some(p) = left {
                    self.repair_link(p, cn, g);
                }
                return Located::Leaf(cn, prev.is_some());
            };
            let hi = ci.help_idx();
            if hi >= 0 {
                self.counters.helps.add(1);
                match self.help(prev, curr, g) {
                    Some(x) => {
                        curr = x;
                        continue;
                    }
                    None => return Located::Retry,
                }
            }
            if hi == NO_HELP {
                return Located::Retry;
            }
            let cidx = ci.route(key);
            let child = ci.child(cidx, g);
            if self.needs_rebalance(ci, unsafe { child.deref() }) {
                if rebalanced {
                    self.counters.locality_deferrals.add(1);
                    return Located::Retry;
                }
                if !ci.set_help_idx(cidx) {
                    continue;
                }
                rebalanced = true;
                match self.help(prev, curr, g) {
                    Some(x) => {
                        curr = x;
                        continue;
                    }
                    None => return Located::Retry,
                }
            }
            left = if cidx > 0 {
                Some(unsafe { ci.child(cidx - 1, g).deref() })
            } else {
                match left.map(|l| &l.kind) {
                    Some(Kind::Internal(li)) => Some(unsafe { li.child(li.degree() - 1, g).deref() }),
                    _ => None,
                }
            };
            prev = Some((cn, cidx));
            curr = child;
            rebalanced = false;
        }
    }

    /// Points the left neighbour's `next` at the newest generation of its successor, so
    /// replaced leaves stop being reachable from the leaf level and can be freed.
    ///
    /// Only an unfrozen neighbour is repaired, and frozenness is checked after the newest
    /// generation was read: that generation then predates any replacement of the neighbour
    /// and holds none of its keys, so a scan can never meet those keys twice.
    fn repair_link(&self, p: &Node, leaf: &Node, g: &Guard) {
        let Kind::Leaf(pl) = &p.kind else { return };
        let old = pl.next(g);
        if old.is_null() || std::ptr::eq(old.as_raw(), leaf) {
            return;
        }
        let mut newest = old;
        loop {
            let nn = unsafe { newest.deref() }.as_leaf().new_next(g);
            if nn.is_null() {
                break;
            }
            newest = nn;
        }
        if newest != old && !p.is_frozen() {
            pl.repair_next(old, newest, g);
        }
    }

    /// Leaf-level update; `value` is `TOMBSTONE` on the delete path. With `may_merge`, a leaf
    /// left with fewer than `leaf_min` live keys is frozen so the next pass rebalances it.
    pub(crate) fn insert_leaf(
        &self,
        leaf: &Node,
        key: Key,
        value: Value,
        may_merge: bool,
        g: &Guard,
    ) -> Option<ListUpdate> {
        let l = leaf.as_leaf();
        if !self.admit(leaf, g) {
            return None;
        }
        match l.list.insert(key, value, &self.cx, g) {
            Ok(u) => {
                if u.prior.is_none() {
                    l.bump_count();
                }
                l.bump_updates();
                self.note_effect(leaf, u.prior, value, may_merge, g);
                Some(u)
            }
            Err(_) => {
                self.freeze_leaf(leaf, g);
                None
            }
        }
    }

    pub(crate) fn note_effect(&self, leaf: &Node, prior: Option<Value>, value: Value, may_merge: bool, g: &Guard) {
        let was_live = prior.is_some_and(|v| !is_tombstone(v));
        let l = leaf.as_leaf();
        match (was_live, is_tombstone(value)) {
            (false, false) => {
                l.add_live(1);
            }
            // The decrement must happen whether or not the leaf is frozen, so no match guard.
            #[allow(clippy::collapsible_match)]
            (true, true) => {
                if l.add_live(-1) < self.cfg.leaf_min as isize && may_merge {
                    self.freeze_leaf(leaf, g);
                }
            }
            _ => {}
        }
    }

    pub(crate) fn delete_leaf(&self, leaf: &Node, key: Key, may_merge: bool, g: &Guard) -> Option<ListUpdate> {
        let l = leaf.as_leaf();
        if !self.admit(leaf, g) {
            return None;
        }
        let present = match l.list.find(key, g) {
            Ok((_, succ)) => unsafe { succ.deref() }.key() == key,
            Err(_) => {
                self.freeze_leaf(leaf, g);
                return None;
            }
        };
        if !present {
            return Some(ListUpdate { prior: None, ts: None });
        }
        self.insert_leaf(leaf, key, TOMBSTONE, may_merge, g)
    }

    /// False, after freezing if a threshold is reached, when the leaf takes no more updates.
    pub(crate) fn admit(&self, leaf: &Node, g: &Guard) -> bool {
        if leaf.is_frozen() {
            return false;
        }
        let l = leaf.as_leaf();
        let budget = self.cfg.update_budget;
        if l.count() >= self.cfg.leaf_max || (budget > 0 && l.updates() >= budget) {
            self.freeze_leaf(leaf, g);
            return false;
        }
        true
    }

    /// The leaf whose range holds `key`, found by one descent that ignores freezing.
    pub(crate) fn leaf_for<'g>(&self, key: Key, g: &'g Guard) -> Option<&'g Node> {
        let mut curr = unsafe { self.root.load(Acquire, g).as_ref() }?;
        while let Kind::Internal(i) = &curr.kind {
            curr = unsafe { i.child(i.route(key), g).deref() };
        }
        Some(curr)
    }

    pub fn search(&self, key: Key) -> Result<Option<Value>, Error> {
        check_key(key)?;
        let g = pin();
        let Some(leaf) = self.leaf_for(key, &g) else {
            return Ok(None);
        };
        let n = leaf.as_leaf().list.find_unchecked(key, &g);
        if n.key() != key {
            return Ok(None);
        }
        let v = VersionedList::read_current(n, &self.cx, &g);
        Ok((!is_tombstone(v)).then_some(v))
    }

    pub fn range_query(&self, low: Key, high: Key) -> Result<Vec<(Key, Value)>, Error> {
        self.range_query_traced(low, high).map(|(r, _)| r)
    }

    /// Range query that also returns the snapshot timestamp it read at.
    pub fn range_query_traced(&self, low: Key, high: Key) -> Result<(Vec<(Key, Value)>, Timestamp), Error> {
        check_key(low)?;
        check_key(high)?;
        if low > high {
            return Err(Error::InvalidRange { low, high });
        }
        let g = pin();
        let cx = &self.cx;
        let h = cx.tracker.add_timestamp(&g);
        // Updates that begin after the timestamp was taken can still be stamped with it.
        let snap = h.ts() - 1;
        cx.hooks.fire(hooks::RQ_AFTER_TIMESTAMP);
        let mut out = Vec::new();
        if let Some(first) = self.leaf_for(low, &g) {
            let mut curr = Shared::from(first as *const Node);
            let mut prev: Option<&Node> = None;
            while !curr.is_null() {
                let mut at = curr;
                loop {
                    let nn = unsafe { at.deref() }.as_leaf().new_next(&g);
                    match unsafe { nn.as_ref() } {
                        Some(n) if n.as_leaf().ts() <= snap => at = nn,
                        _ => break,
                    }
                }
                if self.cfg.rq_repair && at != curr {
                    if let Some(p) = prev {
                        p.as_leaf().repair_next(curr, at, &g);
                    }
                }
                let l = unsafe { at.deref() };
                if l.as_leaf().list.collect_range(low, high, snap, &mut out, cx, &g) {
                    break;
                }
                prev = Some(l);
                curr = l.as_leaf().next(&g);
            }
        }
        cx.tracker.mark_finished(h);
        Ok((out, snap))
    }

    /// Every reachable leaf in key order (quiescent use only).
    #[cfg(test)]
    pub(crate) fn leaves<'g>(&self, g: &'g Guard) -> Vec<&'g Node> {
        let mut out = Vec::new();
        let mut stack: Vec<&Node> = unsafe { self.root.load(Acquire, g).as_ref() }.into_iter().collect();
        while let Some(n) = stack.pop() {
            match &n.kind {
                Kind::Leaf(_) => out.push(n),
                Kind::Internal(i) => stack.extend((0..i.degree()).rev().map(|c| unsafe { i.child(c, g).deref() })),
            }
        }
        out
    }
}

impl Drop for Tree {
    fn drop(&mut self) {
        let g = unsafe { crossbeam_epoch::unprotected() };
        let mut seen = HashSet::new();
        let mut stack = vec![self.root.load(Relaxed, g).as_raw()];
        let mut reachable = Vec::new();
        while let Some(p) = stack.pop() {
            if p.is_null() || !seen.insert(p) {
                continue;
            }
            reachable.push(p);
            let n = unsafe { &*p };
            if let Kind::Internal(i) = &n.kind {
                stack.extend(i.children(g));
            }
        }
        let mut pending = Vec::new();
        for &p in &reachable {
            if let Some(plan) = unsafe { &*p }.plan(g) {
                pending.extend(plan.created.iter().copied().filter(|c| !seen.contains(c)));
            }
        }
        for p in reachable.into_iter().chain(pending) {
            unsafe { free_unpublished(p) };
        }
    }
}

#[cfg(test)]
mod tests;
