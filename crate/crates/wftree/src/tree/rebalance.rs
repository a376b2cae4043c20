//! Freezing, replacement plans and their installation.
//!
//! A rebalance of child `c` under internal node `n` runs as: set `n.help_idx`, freeze `n`
//! (marking every child link), agree on a [`Plan`] for `n`'s replacement, point each replaced
//! leaf's `new_next` at its successor, then swap a copy of the planned content into `n`'s parent.
//! Any thread that finds `help_idx` set runs the same steps and reaches the same plan.

use std::sync::atomic::Ordering::{AcqRel, Acquire};

use crossbeam_epoch::{Guard, Shared};

use super::node::*;
use super::Tree;
use crate::hooks;
use crate::types::Key;
use crate::vlist::Entry;

/// What a frozen node is to be replaced by.
pub(crate) struct Content {
    pub keys: Vec<Key>,
    pub children: Vec<*const Node>,
    /// Nodes unlinked along with the frozen node itself.
    pub replaced: Vec<*const Node>,
}

impl Content {
    fn of_plan(p: &Plan) -> Self {
        Self {
            keys: p.keys.clone(),
            children: p.children.clone(),
            replaced: p.replaced.clone(),
        }
    }
}

/// Schedules `n` for release one grace period from now.
///
/// # Safety
/// `n` must be unlinked from the tree.
pub(crate) unsafe fn retire_node(n: *const Node, g: &Guard) {
    let node = &*n;
    if node.mark_retired().is_err() {
        debug_assert!(false, "node retired twice");
        return;
    }
    let addr = n as usize;
    if node.is_leaf() {
        g.defer_unchecked(move || release_leaf(addr as *const Node));
    } else {
        g.defer_unchecked(move || drop(Box::from_raw(addr as *mut Node)));
    }
}

fn at(p: *const Node) -> &'static Node {
    // Plan pointers stay valid while the guard that produced them is pinned.
    unsafe { &*p }
}

impl Tree {
    pub(crate) fn freeze_leaf(&self, leaf: &Node, g: &Guard) {
        let l = leaf.as_leaf();
        l.list.freeze(g);
        l.set_count(l.list.size(g));
        leaf.set_frozen();
    }

    pub(crate) fn freeze_internal(&self, n: &Node, g: &Guard) {
        let i = n.as_internal();
        i.claim_no_help();
        i.mark_children(g);
        n.set_frozen();
    }

    /// Freezes `curr` and swaps its planned replacement into `prev` (or the root).
    pub(crate) fn help<'g>(
        &self,
        prev: Option<(&Node, usize)>,
        curr: Shared<'g, Node>,
        g: &'g Guard,
    ) -> Option<Shared<'g, Node>> {
        self.freeze_internal(unsafe { curr.deref() }, g);
        self.install(prev, curr, g)
    }

    /// Content replacing frozen node `n`.
    pub(crate) fn resolve(&self, n: &Node, g: &Guard) -> Content {
        if n.is_leaf() {
            return Content::of_plan(self.root_leaf_plan(n, g));
        }
        let i = n.as_internal();
        let hi = i.help_idx();
        if hi == NO_HELP {
            return Content {
                keys: i.keys().to_vec(),
                children: i.children(g),
                replaced: Vec::new(),
            };
        }
        debug_assert!(hi >= 0, "resolving an unfrozen node");
        Content::of_plan(self.ensure_plan(n, hi as usize, g))
    }

    fn claim<'g>(&self, n: &Node, cand: Plan, g: &'g Guard) -> &'g Plan {
        let (p, won) = n.claim_plan(cand, g);
        if won {
            let c = &self.counters;
            match p.kind {
                Rebalance::Split => c.splits.add(1),
                Rebalance::Merge => c.merges.add(1),
                Rebalance::Borrow => c.borrows.add(1),
                Rebalance::Copy => c.copies.add(1),
            }
        }
        for &(old, new) in &p.new_next {
            at(old).as_leaf().set_new_next(new, g);
        }
        p
    }

    fn root_leaf_plan<'g>(&self, leaf: &Node, g: &'g Guard) -> &'g Plan {
        if let Some(p) = leaf.plan(g) {
            return self.claim_existing(p, g);
        }
        self.freeze_leaf(leaf, g);
        let cx = &self.cx;
        let e = leaf.as_leaf().list.entries(cx.tracker.min_active_ts(g), cx, g);
        let ts = cx.tracker.current_ts(g);
        let next = leaf.as_leaf().next(g).as_raw();
        let me = leaf as *const Node;
        let cand = if e.len() >= self.cfg.leaf_max {
            let (l, r, sep) = self.split_entries(&e, ts, next);
            Plan {
                kind: Rebalance::Split,
                keys: vec![sep],
                children: vec![l, r],
                created: vec![l, r],
                replaced: Vec::new(),
                new_next: vec![(me, l)],
            }
        } else {
            let c = Node::leaf(&e, ts, next, &cx.stats) as *const Node;
            Plan {
                kind: Rebalance::Copy,
                keys: Vec::new(),
                children: vec![c],
                created: vec![c],
                replaced: Vec::new(),
                new_next: vec![(me, c)],
            }
        };
        self.claim(leaf, cand, g)
    }

    /// Re-publishes `new_next` links for a plan another thread claimed.
    fn claim_existing<'g>(&self, p: &'g Plan, g: &Guard) -> &'g Plan {
        for &(old, new) in &p.new_next {
            at(old).as_leaf().set_new_next(new, g);
        }
        p
    }

    fn split_entries(&self, e: &[Entry], ts: i64, next: *const Node) -> (*const Node, *const Node, Key) {
        let mid = e.len().div_ceil(2);
        let stats = &self.cx.stats;
        let r = Node::leaf(&e[mid..], ts, next, stats) as *const Node;
        let l = Node::leaf(&e[..mid], ts, r, stats) as *const Node;
        (l, r, e[mid].key)
    }

    /// The plan replacing internal node `n`, which rebalances its child `cidx`.
    pub(crate) fn ensure_plan<'g>(&self, n: &Node, cidx: usize, g: &'g Guard) -> &'g Plan {
        if let Some(p) = n.plan(g) {
            return self.claim_existing(p, g);
        }
        self.freeze_internal(n, g);
        let ni = n.as_internal();
        let keys = ni.keys().to_vec();
        let children = ni.children(g);
        let c = at(children[cidx]);
        let cand = if c.is_leaf() {
            self.leaf_plan(keys, children, cidx, g)
        } else {
            self.internal_plan(keys, children, cidx, g)
        };
        self.claim(n, cand, g)
    }

    fn sibling(&self, children: &[*const Node], cidx: usize) -> Option<(usize, usize)> {
        if children.len() < 2 {
            None
        } else if cidx > 0 {
            Some((cidx - 1, cidx))
        } else {
            Some((0, 1))
        }
    }

    fn leaf_plan(&self, mut keys: Vec<Key>, mut children: Vec<*const Node>, cidx: usize, g: &Guard) -> Plan {
        let cx = &self.cx;
        let (lmax, lmin) = (self.cfg.leaf_max, self.cfg.leaf_min);
        let c = at(children[cidx]);
        self.freeze_leaf(c, g);
        let min_active = cx.tracker.min_active_ts(g);
        let e = c.as_leaf().list.entries(min_active, cx, g);
        let old = children[cidx];
        if e.len() >= lmax {
            let ts = cx.tracker.current_ts(g);
            let (l, r, sep) = self.split_entries(&e, ts, c.as_leaf().next(g).as_raw());
            keys.insert(cidx, sep);
            children.splice(cidx..=cidx, [l, r]);
            return Plan {
                kind: Rebalance::Split,
                keys,
                children,
                created: vec![l, r],
                replaced: vec![old],
                new_next: vec![(old, l)],
            };
        }
        if e.len() < lmin {
            if let Some((li, ri)) = self.sibling(&children, cidx) {
                let sib = at(children[if li == cidx { ri } else { li }]);
                self.freeze_leaf(sib, g);
                let (lo, ro) = (children[li], children[ri]);
                let mut le = at(lo).as_leaf().list.entries(min_active, cx, g);
                let mut re = at(ro).as_leaf().list.entries(min_active, cx, g);
                let ts = cx.tracker.current_ts(g);
                let rnext = at(ro).as_leaf().next(g).as_raw();
                if le.len() + re.len() < lmax {
                    le.append(&mut re);
                    let m = Node::leaf(&le, ts, rnext, &cx.stats) as *const Node;
                    keys.remove(li);
                    children[li] = m;
                    children.remove(ri);
                    return Plan {
                        kind: Rebalance::Merge,
                        keys,
                        children,
                        created: vec![m],
                        replaced: vec![lo, ro],
                        new_next: vec![(lo, m), (ro, m)],
                    };
                }
                if le.len() < lmin {
                    le.push(re.remove(0));
                } else {
                    re.insert(0, le.pop().expect("donor leaf is non-empty"));
                }
                let r = Node::leaf(&re, ts, rnext, &cx.stats) as *const Node;
                let l = Node::leaf(&le, ts, r, &cx.stats) as *const Node;
                keys[li] = re[0].key;
                children[li] = l;
                children[ri] = r;
                return Plan {
                    kind: Rebalance::Borrow,
                    keys,
                    children,
                    created: vec![l, r],
                    replaced: vec![lo, ro],
                    new_next: vec![(lo, l), (ro, r)],
                };
            }
        }
        let ts = cx.tracker.current_ts(g);
        let m = Node::leaf(&e, ts, c.as_leaf().next(g).as_raw(), &cx.stats) as *const Node;
        children[cidx] = m;
        Plan {
            kind: Rebalance::Copy,
            keys,
            children,
            created: vec![m],
            replaced: vec![old],
            new_next: vec![(old, m)],
        }
    }

    fn internal_plan(&self, mut keys: Vec<Key>, mut children: Vec<*const Node>, cidx: usize, g: &Guard) -> Plan {
        let stats = &self.cx.stats;
        let c = at(children[cidx]);
        self.freeze_internal(c, g);
        let cc = self.resolve(c, g);
        let mut replaced = vec![children[cidx]];
        replaced.extend_from_slice(&cc.replaced);
        let k = cc.keys.len();
        if k >= self.cfg.max_keys {
            let (l, r, sep) = self.split_internal(&cc.keys, &cc.children);
            keys.insert(cidx, sep);
            children.splice(cidx..=cidx, [l, r]);
            return Plan {
                kind: Rebalance::Split,
                keys,
                children,
                created: vec![l, r],
                replaced,
                new_next: Vec::new(),
            };
        }
        if k <= self.cfg.merge_at() {
            if let Some((li, ri)) = self.sibling(&children, cidx) {
                let sidx = if li == cidx { ri } else { li };
                let s = at(children[sidx]);
                self.freeze_internal(s, g);
                let sc = self.resolve(s, g);
                replaced.push(children[sidx]);
                replaced.extend_from_slice(&sc.replaced);
                let (lc, rc) = if li == cidx { (&cc, &sc) } else { (&sc, &cc) };
                let mut all_keys = lc.keys.clone();
                all_keys.push(keys[li]);
                all_keys.extend_from_slice(&rc.keys);
                let mut all_children = lc.children.clone();
                all_children.extend_from_slice(&rc.children);
                if all_keys.len() < self.cfg.max_keys {
                    let m = Node::internal(all_keys, &all_children, stats) as *const Node;
                    keys.remove(li);
                    children[li] = m;
                    children.remove(ri);
                    return Plan {
                        kind: Rebalance::Merge,
                        keys,
                        children,
                        created: vec![m],
                        replaced,
                        new_next: Vec::new(),
                    };
                }
                let (l, r, sep) = self.split_internal(&all_keys, &all_children);
                keys[li] = sep;
                children[li] = l;
                children[ri] = r;
                return Plan {
                    kind: Rebalance::Borrow,
                    keys,
                    children,
                    created: vec![l, r],
                    replaced,
                    new_next: Vec::new(),
                };
            }
        }
        let m = Node::internal(cc.keys, &cc.children, stats) as *const Node;
        children[cidx] = m;
        Plan {
            kind: Rebalance::Copy,
            keys,
            children,
            created: vec![m],
            replaced,
            new_next: Vec::new(),
        }
    }

    /// Halves of an internal node's content around its middle key.
    fn split_internal(&self, keys: &[Key], children: &[*const Node]) -> (*const Node, *const Node, Key) {
        let mid = keys.len() / 2;
        let stats = &self.cx.stats;
        let l = Node::internal(keys[..mid].to_vec(), &children[..=mid], stats) as *const Node;
        let r = Node::internal(keys[mid + 1..].to_vec(), &children[mid + 1..], stats) as *const Node;
        (l, r, keys[mid])
    }

    /// Swaps the replacement of frozen node `n` into `prev` (or the root). Returns the node now
    /// in `n`'s place, or `None` if another thread got there first.
    pub(crate) fn install<'g>(
        &self,
        prev: Option<(&Node, usize)>,
        n: Shared<'g, Node>,
        g: &'g Guard,
    ) -> Option<Shared<'g, Node>> {
        let nn = unsafe { n.deref() };
        let content = self.resolve(nn, g);
        let stats = &self.cx.stats;
        let (x, fresh): (*const Node, Vec<*const Node>) = match prev {
            None if content.keys.is_empty() => (content.children[0], Vec::new()),
            None if content.keys.len() >= self.cfg.max_keys => {
                let (l, r, sep) = self.split_internal(&content.keys, &content.children);
                let x = Node::internal(vec![sep], &[l, r], stats);
                (x, vec![l, r, x])
            }
            _ => {
                let x = Node::internal(content.keys.clone(), &content.children, stats);
                (x, vec![x])
            }
        };
        self.cx.hooks.fire(hooks::SPLIT_BEFORE_PARENT_CAS);
        let link = match prev {
            Some((p, pidx)) => p.as_internal().child_link(pidx),
            None => &self.root,
        };
        match link.compare_exchange(n, Shared::from(x), AcqRel, Acquire, g) {
            Ok(_) => {
                if fresh.len() == 3 {
                    self.counters.splits.add(1);
                }
                unsafe {
                    retire_node(n.as_raw(), g);
                    for &r in &content.replaced {
                        retire_node(r, g);
                    }
                }
                Some(Shared::from(x))
            }
            Err(_) => {
                for f in fresh {
                    unsafe { free_unpublished(f) };
                }
                None
            }
        }
    }

    /// Splits an overfull internal root, or replaces a frozen leaf root.
    pub(crate) fn balance_root<'g>(&self, root: Shared<'g, Node>, g: &'g Guard) -> Option<Shared<'g, Node>> {
        let r = unsafe { root.deref() };
        match &r.kind {
            Kind::Leaf(_) if !r.is_frozen() => Some(root),
            Kind::Leaf(_) => self.install(None, root, g),
            Kind::Internal(i) if i.len() >= self.cfg.max_keys => {
                self.freeze_internal(r, g);
                self.install(None, root, g)
            }
            Kind::Internal(_) => Some(root),
        }
    }
}
