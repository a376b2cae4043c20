//! Sequential reference map with a timestamped effect log.

use std::collections::{BTreeMap, HashMap};

use crate::types::*;

/// One logical update: `key` went from `prior` (`None` when absent) to `value` at `ts`.
/// A delete has `value == TOMBSTONE`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Effect {
    pub key: Key,
    pub prior: Option<Value>,
    pub value: Value,
    pub ts: Timestamp,
}

impl Effect {
    /// The effect of an insert that returned `r` stamped `ts`; `None` if nothing changed.
    pub fn of_insert(key: Key, value: Value, r: OpResult, ts: Option<Timestamp>) -> Option<Self> {
        let ts = ts?;
        let prior = match r.kind {
            OpKind::KeyUpdated => r.value,
            _ => None,
        };
        Some(Self { key, prior, value, ts })
    }

    /// The effect of a delete that returned `r` stamped `ts`; `None` if the key was absent.
    pub fn of_delete(key: Key, r: OpResult, ts: Option<Timestamp>) -> Option<Self> {
        match (r.kind, ts) {
            (OpKind::KeyUpdated, Some(ts)) => Some(Self {
                key,
                prior: r.value,
                value: TOMBSTONE,
                ts,
            }),
            _ => None,
        }
    }
}

/// A plain ordered map with the store's interface and clock.
///
/// Updates are stamped with the current clock; a range query advances the clock and reads the
/// snapshot just below it, the same discipline the store follows.
#[derive(Clone, Debug)]
pub struct SequentialOracle {
    map: BTreeMap<Key, Value>,
    log: Vec<Effect>,
    clock: Timestamp,
}

impl Default for SequentialOracle {
    fn default() -> Self {
        Self::new()
    }
}

impl SequentialOracle {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
            log: Vec::new(),
            clock: TS_GENESIS,
        }
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn insert(&mut self, key: Key, value: Value) -> OpResult {
        let prior = self.map.insert(key, value);
        self.log.push(Effect {
            key,
            prior,
            value,
            ts: self.clock,
        });
        OpResult::for_insert(prior)
    }

    pub fn delete(&mut self, key: Key) -> OpResult {
        let prior = self.map.remove(&key);
        if prior.is_some() {
            self.log.push(Effect {
                key,
                prior,
                value: TOMBSTONE,
                ts: self.clock,
            });
        }
        OpResult::for_delete(prior)
    }

    pub fn search(&self, key: Key) -> Option<Value> {
        self.map.get(&key).copied()
    }

    /// Current contents of `[low, high]` and the snapshot they belong to.
    pub fn range_query(&mut self, low: Key, high: Key) -> (Vec<(Key, Value)>, Timestamp) {
        self.clock += 1;
        let r = self.map.range(low..=high).map(|(&k, &v)| (k, v)).collect();
        (r, self.clock - 1)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn effects(&self) -> &[Effect] {
        &self.log
    }

    /// Live contents as of snapshot `t`, rebuilt from the log.
    pub fn snapshot_at(&self, t: Timestamp) -> BTreeMap<Key, Value> {
        let mut r = Replay::new(BTreeMap::new(), self.log.clone());
        r.advance_to(t);
        r.into_state()
    }
}

/// Rebuilds map states from an effect log in timestamp order.
///
/// Updates that land between two range queries share a timestamp, so effects on one key with
/// equal timestamps have no recorded order. Their priors chain them: each effect is an edge
/// `prior -> value` (absent counts as a tombstone), the chain is a path starting at the key's
/// value before the group, and its end is the only vertex with one more edge in than out.
/// A group that does not chain that way is reported as an anomaly.
pub struct Replay {
    state: BTreeMap<Key, Value>,
    log: Vec<Effect>,
    next: usize,
    anomalies: Vec<String>,
}

impl Replay {
    pub fn new(base: BTreeMap<Key, Value>, mut log: Vec<Effect>) -> Self {
        log.sort_by_key(|e| (e.ts, e.key));
        Self {
            state: base,
            log,
            next: 0,
            anomalies: Vec::new(),
        }
    }

    /// Applies every effect with timestamp ≤ `t`. Calls must not go backwards.
    pub fn advance_to(&mut self, t: Timestamp) {
        while self.next < self.log.len() && self.log[self.next].ts <= t {
            let (ts, key) = (self.log[self.next].ts, self.log[self.next].key);
            let end = self.log[self.next..]
                .iter()
                .position(|e| (e.ts, e.key) != (ts, key))
                .map_or(self.log.len(), |n| self.next + n);
            self.apply_group(self.next, end);
            self.next = end;
        }
    }

    fn apply_group(&mut self, from: usize, to: usize) {
        let group = &self.log[from..to];
        let key = group[0].key;
        let before = self.state.get(&key).copied().unwrap_or(TOMBSTONE);
        let mut degree: HashMap<Value, i64> = HashMap::new();
        for e in group {
            *degree.entry(e.prior.unwrap_or(TOMBSTONE)).or_default() += 1;
            *degree.entry(e.value).or_default() -= 1;
        }
        let starts: Vec<Value> = degree.iter().filter(|(_, &d)| d > 0).map(|(&v, _)| v).collect();
        let ends: Vec<Value> = degree.iter().filter(|(_, &d)| d < 0).map(|(&v, _)| v).collect();
        let after = match (starts.as_slice(), ends.as_slice()) {
            ([], []) if degree.contains_key(&before) => before,
            ([s], [e]) if *s == before && degree[s] == 1 && degree[e] == -1 => *e,
            _ => {
                self.anomalies.push(format!(
                    "key {key} at ts {}: {} effects do not chain from {}",
                    group[0].ts,
                    group.len(),
                    show(before)
                ));
                group[group.len() - 1].value
            }
        };
        if is_tombstone(after) {
            self.state.remove(&key);
        } else {
            self.state.insert(key, after);
        }
    }

    pub fn state(&self) -> &BTreeMap<Key, Value> {
        &self.state
    }

    pub fn into_state(self) -> BTreeMap<Key, Value> {
        self.state
    }

    pub fn anomalies(&self) -> &[String] {
        &self.anomalies
    }
}

fn show(v: Value) -> String {
    if is_tombstone(v) {
        "absent".into()
    } else {
        v.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eff(key: Key, prior: Option<Value>, value: Value, ts: Timestamp) -> Effect {
        Effect { key, prior, value, ts }
    }

    #[test]
    fn adt_examples() {
        let mut o = SequentialOracle::new();
        assert_eq!(o.insert(5, 50), OpResult::inserted());
        assert_eq!(o.insert(5, 99), OpResult::updated(50));
        assert_eq!(o.search(5), Some(99));
        assert_eq!(o.delete(5), OpResult::updated(99));
        assert_eq!(o.delete(5), OpResult::not_present());
        assert_eq!(o.search(5), None);
        assert_eq!(o.effects().len(), 3);
    }

    #[test]
    fn snapshot_sees_only_earlier_stamps() {
        let mut o = SequentialOracle::new();
        for k in 1..=5 {
            o.insert(k, k);
        }
        let (r, t) = o.range_query(1, 10);
        assert_eq!(r.len(), 5);
        o.insert(4, 40);
        o.delete(2);
        let snap = o.snapshot_at(t);
        assert_eq!(snap.into_iter().collect::<Vec<_>>(), r);
        let now = o.snapshot_at(o.clock());
        assert_eq!(now.get(&4), Some(&40));
        assert_eq!(now.get(&2), None);
    }

    #[test]
    fn same_stamp_group_resolves_by_chaining() {
        // Recorded out of order; the priors fix the order 1 -> 2 -> absent -> 3.
        let log = vec![eff(7, None, 3, 5), eff(7, Some(1), 2, 5), eff(7, Some(2), TOMBSTONE, 5)];
        let mut r = Replay::new(BTreeMap::from([(7, 1)]), log);
        r.advance_to(5);
        assert!(r.anomalies().is_empty(), "{:?}", r.anomalies());
        assert_eq!(r.state().get(&7), Some(&3));
    }

    #[test]
    fn cyclic_group_returns_to_start() {
        let log = vec![eff(7, Some(2), 1, 3), eff(7, Some(1), 2, 3)];
        let mut r = Replay::new(BTreeMap::from([(7, 1)]), log);
        r.advance_to(3);
        assert!(r.anomalies().is_empty());
        assert_eq!(r.state().get(&7), Some(&1));
    }

    #[test]
    fn broken_chain_is_an_anomaly() {
        // Two effects both claim to have replaced 1: one update was applied twice.
        let log = vec![eff(7, Some(1), 2, 3), eff(7, Some(1), 4, 3)];
        let mut r = Replay::new(BTreeMap::from([(7, 1)]), log);
        r.advance_to(3);
        assert_eq!(r.anomalies().len(), 1);
        let mut r = Replay::new(BTreeMap::new(), vec![eff(7, Some(9), 2, 3)]);
        r.advance_to(3);
        assert_eq!(r.anomalies().len(), 1);
    }

    #[test]
    fn effect_from_results() {
        assert_eq!(
            Effect::of_insert(3, 30, OpResult::inserted(), Some(4)),
            Some(eff(3, None, 30, 4))
        );
        assert_eq!(
            Effect::of_insert(3, 30, OpResult::updated(20), Some(4)),
            Some(eff(3, Some(20), 30, 4))
        );
        assert_eq!(Effect::of_insert(3, 30, OpResult::updated(30), None), None);
        assert_eq!(
            Effect::of_delete(3, OpResult::updated(30), Some(6)),
            Some(eff(3, Some(30), TOMBSTONE, 6))
        );
        assert_eq!(Effect::of_delete(3, OpResult::not_present(), None), None);
    }

    proptest! {
        #[test]
        fn snapshots_match_recorded_range_queries(
            ops in prop::collection::vec((0u8..4, 1u64..20, 1u64..100), 1..300)
        ) {
            let mut o = SequentialOracle::new();
            let mut seen = Vec::new();
            for (kind, k, v) in ops {
                match kind {
                    0 | 1 => { o.insert(k, v); }
                    2 => { o.delete(k); }
                    _ => seen.push(o.range_query(1, 19)),
                }
            }
            for (r, t) in seen {
                let snap: Vec<_> = o.snapshot_at(t).into_iter().collect();
                prop_assert_eq!(snap, r);
            }
        }
    }
}
