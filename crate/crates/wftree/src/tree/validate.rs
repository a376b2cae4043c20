//! Quiescent structure checks.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::Ordering::Acquire;

use crossbeam_epoch::Guard;

use super::node::{Kind, Node};
use super::Tree;
use crate::reclaim::pin;
use crate::types::{is_tombstone, Key, KEY_NEG_INF, KEY_POS_INF};
use crate::vlist::VersionedList;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TreeStats {
    /// Edges from the root to any leaf; 0 for a leaf root or an empty tree.
    pub depth: usize,
    pub leaves: usize,
    pub internals: usize,
    pub key_nodes: usize,
    pub versions: usize,
    pub live_keys: usize,
}

#[derive(Clone, Debug, Default)]
pub struct StructureReport {
    pub stats: TreeStats,
    pub violations: Vec<String>,
}

impl StructureReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Walk<'a, 'g> {
    tree: &'a Tree,
    g: &'g Guard,
    report: StructureReport,
    leaf_depth: Option<usize>,
    leaves: Vec<&'g Node>,
}

impl<'g> Walk<'_, 'g> {
    fn fail(&mut self, msg: String) {
        if self.report.violations.len() < 64 {
            self.report.violations.push(msg);
        }
    }

    /// Every key under `n` must lie in `[lo, hi)`.
    fn node(&mut self, n: &'g Node, lo: Key, hi: Key, depth: usize) {
        match &n.kind {
            Kind::Leaf(l) => {
                self.report.stats.leaves += 1;
                match self.leaf_depth {
                    None => self.leaf_depth = Some(depth),
                    Some(d) if d != depth => self.fail(format!("leaf at depth {depth}, expected {d}")),
                    _ => {}
                }
                if let Err(e) = l.list.check(self.g) {
                    self.fail(format!("leaf list: {e}"));
                }
                let mut versions = HashSet::new();
                for k in l.list.iter(self.g) {
                    self.report.stats.key_nodes += 1;
                    let mut p = k.head(self.g).as_raw();
                    while let Some(v) = unsafe { p.as_ref() } {
                        self.report.stats.versions += 1;
                        if !versions.insert(p) {
                            self.fail(format!("key {}: a version appears twice in the leaf", k.key()));
                            break;
                        }
                        p = v.older();
                    }
                    if k.key() < lo || (hi != KEY_POS_INF && k.key() >= hi) {
                        self.fail(format!("key {} outside [{lo}, {hi})", k.key()));
                    }
                    if !is_tombstone(VersionedList::read_current(k, &self.tree.cx, self.g)) {
                        self.report.stats.live_keys += 1;
                    }
                }
                self.leaves.push(n);
            }
            Kind::Internal(i) => {
                self.report.stats.internals += 1;
                let keys = i.keys();
                if i.degree() != keys.len() + 1 {
                    self.fail(format!("{} keys but {} children", keys.len(), i.degree()));
                    return;
                }
                if keys.windows(2).any(|w| w[0] >= w[1]) {
                    self.fail(format!("unsorted separators {keys:?}"));
                }
                if keys.iter().any(|&k| k < lo || (hi != KEY_POS_INF && k >= hi)) {
                    self.fail(format!("separators {keys:?} outside [{lo}, {hi})"));
                }
                for c in 0..i.degree() {
                    let clo = if c == 0 { lo } else { keys[c - 1] };
                    let chi = if c == keys.len() { hi } else { keys[c] };
                    let child = unsafe { i.child(c, self.g).deref() };
                    self.node(child, clo, chi, depth + 1);
                }
            }
        }
    }

    /// The `next` chain, with replaced leaves resolved through `new_next`, must visit exactly
    /// the tree's leaves in key order.
    fn chain(&mut self) {
        let g = self.g;
        let in_tree: HashSet<*const Node> = self.leaves.iter().map(|&n| n as *const Node).collect();
        let pos: HashMap<*const Node, usize> = self
            .leaves
            .iter()
            .enumerate()
            .map(|(i, &n)| (n as *const Node, i))
            .collect();
        let Some(&first) = self.leaves.first() else {
            return;
        };
        let mut expect = 0;
        let mut curr = first as *const Node;
        let mut steps = 0;
        while !curr.is_null() {
            let mut seen = HashSet::new();
            while !in_tree.contains(&curr) {
                if !seen.insert(curr) {
                    self.fail("cycle in newNext links".into());
                    return;
                }
                let nn = unsafe { &*curr }.as_leaf().new_next(g).as_raw();
                if nn.is_null() {
                    self.fail("next chain reaches a replaced leaf with no successor".into());
                    return;
                }
                curr = nn;
            }
            if pos[&curr] != expect {
                self.fail(format!(
                    "next chain visits leaf {} where {expect} was expected",
                    pos[&curr]
                ));
                return;
            }
            expect += 1;
            steps += 1;
            if steps > self.leaves.len() {
                self.fail("next chain longer than the leaf level".into());
                return;
            }
            curr = unsafe { &*curr }.as_leaf().next(g).as_raw();
        }
        if expect != self.leaves.len() {
            self.fail(format!(
                "next chain ends after {expect} of {} leaves",
                self.leaves.len()
            ));
        }
    }

    /// Following `new_next` from any leaf terminates.
    fn acyclic(&mut self) {
        let g = self.g;
        for i in 0..self.leaves.len() {
            let mut seen = HashSet::new();
            let mut curr = self.leaves[i] as *const Node;
            while !curr.is_null() {
                if !seen.insert(curr) {
                    self.fail("cycle in newNext links".into());
                    break;
                }
                curr = unsafe { &*curr }.as_leaf().new_next(g).as_raw();
            }
        }
    }
}

impl Tree {
    /// Checks key order, separator bounds, uniform depth and the leaf-level link chain.
    /// Meaningful only while no operation is running.
    pub fn validate_structure(&self) -> StructureReport {
        let g = pin();
        let mut w = Walk {
            tree: self,
            g: &g,
            report: StructureReport::default(),
            leaf_depth: None,
            leaves: Vec::new(),
        };
        if let Some(root) = unsafe { self.root.load(Acquire, &g).as_ref() } {
            w.node(root, KEY_NEG_INF, KEY_POS_INF, 0);
            w.chain();
            w.acyclic();
        }
        w.report.stats.depth = w.leaf_depth.unwrap_or(0);
        w.report
    }

    pub fn stats(&self) -> TreeStats {
        self.validate_structure().stats
    }
}
