//! Exhaustive linearizability checking of small histories.
//!
//! Depth-first search over linearization orders in the style of Wing and Gong: at each step any
//! operation invoked before the earliest pending response may go next, provided the sequential
//! map gives the result it returned. Failed (linearized set, map state) pairs are memoized, so
//! every pair is expanded at most once.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;

use super::history::{EventKind, HistoryEvent, Op, Ret};
use crate::types::*;

pub const MAX_THREADS: usize = 4;
pub const MAX_OPS: usize = 24;
pub const MAX_KEYS: usize = 8;

/// An invocation paired with its response, if it has one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operation {
    pub thread: usize,
    pub op: Op,
    pub ret: Option<Ret>,
    pub invoke: u64,
    pub respond: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// A legal sequential order of all operations.
    Linearizable { order: Vec<Operation> },
    /// The shortest prefix of the history, ending at a response, that has no linearization.
    NotLinearizable { prefix: Vec<HistoryEvent> },
}

impl Verdict {
    pub fn is_linearizable(&self) -> bool {
        matches!(self, Verdict::Linearizable { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CheckError {
    #[error("history exceeds checker bounds: {0}")]
    BoundsExceeded(String),
    #[error("malformed history: {0}")]
    Malformed(String),
}

/// Pairs events into operations ordered by invocation. Unanswered invocations are pending.
pub fn operations(history: &[HistoryEvent]) -> Result<Vec<Operation>, CheckError> {
    let mut open: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ops: Vec<Operation> = Vec::new();
    let mut last = None;
    for e in history {
        if last.is_some_and(|s| e.seq <= s) {
            return Err(CheckError::Malformed(format!("sequence number {} out of order", e.seq)));
        }
        last = Some(e.seq);
        match e.kind {
            EventKind::Invoke => {
                if open.insert(e.thread, ops.len()).is_some() {
                    return Err(CheckError::Malformed(format!("thread {} invokes twice", e.thread)));
                }
                ops.push(Operation {
                    thread: e.thread,
                    op: e.op.clone(),
                    ret: None,
                    invoke: e.seq,
                    respond: None,
                });
            }
            EventKind::Respond => {
                let Some(i) = open.remove(&e.thread) else {
                    return Err(CheckError::Malformed(format!(
                        "thread {} responds without invoking",
                        e.thread
                    )));
                };
                if ops[i].op != e.op || e.ret.is_none() {
                    return Err(CheckError::Malformed(format!("bad response on thread {}", e.thread)));
                }
                ops[i].ret = e.ret.clone();
                ops[i].respond = Some(e.seq);
            }
        }
    }
    Ok(ops)
}

fn point_key(op: &Op) -> Option<Key> {
    match *op {
        Op::Insert(k, _) | Op::Delete(k) | Op::Search(k) => Some(k),
        Op::Range(..) => None,
    }
}

fn check_bounds(ops: &[Operation]) -> Result<Vec<Key>, CheckError> {
    let threads: HashSet<usize> = ops.iter().map(|o| o.thread).collect();
    if threads.len() > MAX_THREADS {
        return Err(CheckError::BoundsExceeded(format!(
            "{} threads > {MAX_THREADS}",
            threads.len()
        )));
    }
    if ops.len() > MAX_OPS {
        return Err(CheckError::BoundsExceeded(format!(
            "{} operations > {MAX_OPS}",
            ops.len()
        )));
    }
    let mut keys: Vec<Key> = ops.iter().filter_map(|o| point_key(&o.op)).collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.len() > MAX_KEYS {
        return Err(CheckError::BoundsExceeded(format!("{} keys > {MAX_KEYS}", keys.len())));
    }
    Ok(keys)
}

pub fn check_linearizable(history: &[HistoryEvent]) -> Result<Verdict, CheckError> {
    let ops = operations(history)?;
    if ops.iter().any(|o| o.respond.is_none()) {
        return Err(CheckError::Malformed("history has pending operations".into()));
    }
    let keys = check_bounds(&ops)?;
    if let Some(order) = Search::new(&ops, keys.clone()).run() {
        return Ok(Verdict::Linearizable {
            order: order.into_iter().map(|i| ops[i].clone()).collect(),
        });
    }
    for (i, e) in history.iter().enumerate() {
        if e.kind != EventKind::Respond {
            continue;
        }
        let prefix = &history[..=i];
        let ops = operations(prefix)?;
        if Search::new(&ops, keys.clone()).run().is_none() {
            return Ok(Verdict::NotLinearizable {
                prefix: prefix.to_vec(),
            });
        }
    }
    unreachable!("a complete history without linearization has a failing prefix")
}

type State = [Value; MAX_KEYS];

struct Search<'a> {
    ops: &'a [Operation],
    keys: Vec<Key>,
    complete: u32,
    failed: HashSet<(u32, State)>,
    order: Vec<usize>,
}

impl<'a> Search<'a> {
    fn new(ops: &'a [Operation], keys: Vec<Key>) -> Self {
        let complete = ops
            .iter()
            .enumerate()
            .filter(|(_, o)| o.respond.is_some())
            .fold(0u32, |m, (i, _)| m | 1 << i);
        Self {
            ops,
            keys,
            complete,
            failed: HashSet::new(),
            order: Vec::new(),
        }
    }

    fn run(mut self) -> Option<Vec<usize>> {
        self.dfs(0, [TOMBSTONE; MAX_KEYS]).then_some(self.order)
    }

    fn dfs(&mut self, done: u32, state: State) -> bool {
        if done & self.complete == self.complete {
            return true;
        }
        if self.failed.contains(&(done, state)) {
            return false;
        }
        let horizon = (0..self.ops.len())
            .filter(|&i| done & 1 << i == 0)
            .filter_map(|i| self.ops[i].respond)
            .min()
            .unwrap_or(u64::MAX);
        for i in 0..self.ops.len() {
            if done & 1 << i != 0 || self.ops[i].invoke > horizon {
                continue;
            }
            let (next, ret) = self.apply(&state, &self.ops[i].op);
            if self.ops[i].ret.as_ref().is_some_and(|r| *r != ret) {
                continue;
            }
            self.order.push(i);
            if self.dfs(done | 1 << i, next) {
                return true;
            }
            self.order.pop();
        }
        self.failed.insert((done, state));
        false
    }

    fn slot(&self, k: Key) -> usize {
        self.keys.binary_search(&k).expect("point keys are indexed")
    }

    fn apply(&self, state: &State, op: &Op) -> (State, Ret) {
        let mut s = *state;
        let live = |v: Value| (!is_tombstone(v)).then_some(v);
        let ret = match *op {
            Op::Insert(k, v) => {
                let i = self.slot(k);
                let prior = live(s[i]);
                s[i] = v;
                Ret::Update(OpResult::for_insert(prior))
            }
            Op::Delete(k) => {
                let i = self.slot(k);
                let prior = live(s[i]);
                s[i] = TOMBSTONE;
                Ret::Update(OpResult::for_delete(prior))
            }
            Op::Search(k) => Ret::Found(live(s[self.slot(k)])),
            Op::Range(lo, hi) => Ret::Range(
                self.keys
                    .iter()
                    .enumerate()
                    .filter(|&(i, &k)| lo <= k && k <= hi && !is_tombstone(s[i]))
                    .map(|(i, &k)| (k, s[i]))
                    .collect(),
            ),
        };
        (s, ret)
    }
}

/// A random operation over keys `1..=keyspace`, values `1..=values`, range width up to `max_width`.
pub fn random_op(rng: &mut impl Rng, keyspace: u64, values: u64, max_width: u64) -> Op {
    let k = rng.gen_range(1..=keyspace);
    match rng.gen_range(0..10) {
        0..=3 => Op::Insert(k, rng.gen_range(1..=values)),
        4..=5 => Op::Delete(k),
        6..=7 => Op::Search(k),
        _ => Op::Range(k, k + rng.gen_range(0..max_width.max(1))),
    }
}

/// A history of `threads` clients sharing one map behind a global lock, each running
/// `ops_per_thread` random operations. The lock makes every such history linearizable; the
/// scheduler interleaves invocations, critical sections and responses at random so operations
/// overlap freely.
pub fn locked_map_history(
    rng: &mut impl Rng,
    threads: usize,
    ops_per_thread: usize,
    keyspace: u64,
    max_width: u64,
) -> Vec<HistoryEvent> {
    #[derive(Clone)]
    enum Phase {
        Idle,
        Invoked(Op),
        Done(Op, Ret),
    }
    let mut map: BTreeMap<Key, Value> = BTreeMap::new();
    let mut left = vec![ops_per_thread; threads];
    let mut phase = vec![Phase::Idle; threads];
    let mut out = Vec::new();
    let mut seq = 0;
    loop {
        let live: Vec<usize> = (0..threads)
            .filter(|&t| left[t] > 0 || !matches!(phase[t], Phase::Idle))
            .collect();
        if live.is_empty() {
            return out;
        }
        let t = live[rng.gen_range(0..live.len())];
        phase[t] = match std::mem::replace(&mut phase[t], Phase::Idle) {
            Phase::Idle => {
                left[t] -= 1;
                let op = random_op(rng, keyspace, 9, max_width);
                out.push(HistoryEvent {
                    thread: t,
                    kind: EventKind::Invoke,
                    op: op.clone(),
                    ret: None,
                    seq,
                });
                seq += 1;
                Phase::Invoked(op)
            }
            Phase::Invoked(op) => {
                let ret = match op {
                    Op::Insert(k, v) => Ret::Update(OpResult::for_insert(map.insert(k, v))),
                    Op::Delete(k) => Ret::Update(OpResult::for_delete(map.remove(&k))),
                    Op::Search(k) => Ret::Found(map.get(&k).copied()),
                    Op::Range(lo, hi) => Ret::Range(map.range(lo..=hi).map(|(&k, &v)| (k, v)).collect()),
                };
                Phase::Done(op, ret)
            }
            Phase::Done(op, ret) => {
                out.push(HistoryEvent {
                    thread: t,
                    kind: EventKind::Respond,
                    op,
                    ret: Some(ret),
                    seq,
                });
                seq += 1;
                Phase::Idle
            }
        };
    }
}

/// Value no generated operation writes.
pub const FORGED: Value = 1_000_003;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// One response reports the value `FORGED`, which was never written. Always a violation.
    Forged,
    /// One response is altered to another result the operation could return in some history
    /// (present/absent flipped, a range entry dropped). Sometimes still linearizable.
    Plausible,
}

/// Alters one response of `history`. Returns `None` when no response can be altered that way.
pub fn tamper(history: &[HistoryEvent], m: Mutation, rng: &mut impl Rng) -> Option<Vec<HistoryEvent>> {
    let candidates: Vec<usize> = history
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == EventKind::Respond)
        .filter(|(_, e)| m == Mutation::Forged || !matches!(e.ret, Some(Ret::Range(ref r)) if r.is_empty()))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let i = candidates[rng.gen_range(0..candidates.len())];
    let mut h = history.to_vec();
    let e = &mut h[i];
    let ret = e.ret.take().unwrap();
    e.ret = Some(match (m, ret) {
        (Mutation::Forged, Ret::Update(_)) => Ret::Update(OpResult::updated(FORGED)),
        (Mutation::Forged, Ret::Found(_)) => Ret::Found(Some(FORGED)),
        (Mutation::Forged, Ret::Range(mut r)) => {
            let Op::Range(lo, _) = e.op else { unreachable!() };
            r.retain(|&(k, _)| k != lo);
            r.insert(r.partition_point(|&(k, _)| k < lo), (lo, FORGED));
            Ret::Range(r)
        }
        (Mutation::Plausible, Ret::Update(r)) => Ret::Update(match r.kind {
            OpKind::KeyUpdated => match e.op {
                Op::Insert(..) => OpResult::inserted(),
                _ => OpResult::not_present(),
            },
            _ => OpResult::updated(rng.gen_range(1..=9)),
        }),
        (Mutation::Plausible, Ret::Found(v)) => Ret::Found(match v {
            Some(_) => None,
            None => Some(rng.gen_range(1..=9)),
        }),
        (Mutation::Plausible, Ret::Range(mut r)) => {
            r.remove(rng.gen_range(0..r.len()));
            Ret::Range(r)
        }
    });
    Some(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(thread: usize, kind: EventKind, op: Op, ret: Option<Ret>, seq: u64) -> HistoryEvent {
        HistoryEvent {
            thread,
            kind,
            op,
            ret,
            seq,
        }
    }

    /// Sequential history: each operation responds before the next is invoked.
    fn sequential(steps: &[(usize, Op, Ret)]) -> Vec<HistoryEvent> {
        let mut h = Vec::new();
        for (i, (t, op, ret)) in steps.iter().enumerate() {
            h.push(ev(*t, EventKind::Invoke, op.clone(), None, 2 * i as u64));
            h.push(ev(
                *t,
                EventKind::Respond,
                op.clone(),
                Some(ret.clone()),
                2 * i as u64 + 1,
            ));
        }
        h
    }

    fn upd(r: OpResult) -> Ret {
        Ret::Update(r)
    }

    #[test]
    fn single_thread_is_linearizable_in_program_order() {
        let h = sequential(&[
            (0, Op::Insert(1, 5), upd(OpResult::inserted())),
            (0, Op::Search(1), Ret::Found(Some(5))),
            (0, Op::Range(1, 3), Ret::Range(vec![(1, 5)])),
            (0, Op::Delete(1), upd(OpResult::updated(5))),
        ]);
        let v = check_linearizable(&h).unwrap();
        let Verdict::Linearizable { order } = v else {
            panic!("{v:?}")
        };
        let ops: Vec<_> = order.iter().map(|o| o.op.clone()).collect();
        assert_eq!(
            ops,
            vec![Op::Insert(1, 5), Op::Search(1), Op::Range(1, 3), Op::Delete(1)]
        );
    }

    #[test]
    fn value_never_inserted_is_rejected_with_minimal_prefix() {
        let h = sequential(&[
            (0, Op::Insert(1, 5), upd(OpResult::inserted())),
            (1, Op::Search(1), Ret::Found(Some(6))),
            (0, Op::Delete(1), upd(OpResult::updated(5))),
        ]);
        let v = check_linearizable(&h).unwrap();
        let Verdict::NotLinearizable { prefix } = v else {
            panic!("{v:?}")
        };
        assert_eq!(prefix.len(), 4);
        assert_eq!(prefix[3].op, Op::Search(1));
    }

    #[test]
    fn overlap_allows_either_order() {
        // Search overlaps the insert, so seeing the new value is fine; seeing it after a
        // completed delete is not.
        let h = vec![
            ev(0, EventKind::Invoke, Op::Insert(2, 7), None, 0),
            ev(1, EventKind::Invoke, Op::Search(2), None, 1),
            ev(1, EventKind::Respond, Op::Search(2), Some(Ret::Found(Some(7))), 2),
            ev(
                0,
                EventKind::Respond,
                Op::Insert(2, 7),
                Some(upd(OpResult::inserted())),
                3,
            ),
        ];
        assert!(check_linearizable(&h).unwrap().is_linearizable());
        let mut bad = h.clone();
        bad.push(ev(0, EventKind::Invoke, Op::Delete(2), None, 4));
        bad.push(ev(
            0,
            EventKind::Respond,
            Op::Delete(2),
            Some(upd(OpResult::updated(7))),
            5,
        ));
        bad.push(ev(1, EventKind::Invoke, Op::Search(2), None, 6));
        bad.push(ev(1, EventKind::Respond, Op::Search(2), Some(Ret::Found(Some(7))), 7));
        assert!(!check_linearizable(&bad).unwrap().is_linearizable());
    }

    #[test]
    fn stale_range_after_update_is_rejected() {
        let h = sequential(&[
            (0, Op::Insert(1, 1), upd(OpResult::inserted())),
            (1, Op::Insert(2, 2), upd(OpResult::inserted())),
            (0, Op::Range(1, 2), Ret::Range(vec![(1, 1)])),
        ]);
        assert!(!check_linearizable(&h).unwrap().is_linearizable());
    }

    #[test]
    fn bounds_and_shape_errors() {
        let steps: Vec<_> = (0..25).map(|i| (0, Op::Search(1 + i % 2), Ret::Found(None))).collect();
        assert!(matches!(
            check_linearizable(&sequential(&steps)),
            Err(CheckError::BoundsExceeded(_))
        ));
        let steps: Vec<_> = (0..9).map(|i| (0, Op::Search(i + 1), Ret::Found(None))).collect();
        assert!(matches!(
            check_linearizable(&sequential(&steps)),
            Err(CheckError::BoundsExceeded(_))
        ));
        let steps: Vec<_> = (0..5).map(|t| (t, Op::Search(1), Ret::Found(None))).collect();
        assert!(matches!(
            check_linearizable(&sequential(&steps)),
            Err(CheckError::BoundsExceeded(_))
        ));
        let pending = vec![ev(0, EventKind::Invoke, Op::Search(1), None, 0)];
        assert!(matches!(check_linearizable(&pending), Err(CheckError::Malformed(_))));
        let orphan = vec![ev(0, EventKind::Respond, Op::Search(1), Some(Ret::Found(None)), 0)];
        assert!(matches!(check_linearizable(&orphan), Err(CheckError::Malformed(_))));
    }

    /// Tries every interleaving consistent with real-time order, without memoization.
    fn brute_force(ops: &[Operation]) -> bool {
        fn go(ops: &[Operation], done: &mut Vec<bool>, map: &mut BTreeMap<Key, Value>) -> bool {
            if done.iter().all(|&d| d) {
                return true;
            }
            for i in 0..ops.len() {
                if done[i] {
                    continue;
                }
                // i may go next only if no pending operation responded before i was invoked.
                let blocked = (0..ops.len()).any(|j| !done[j] && ops[j].respond.unwrap() < ops[i].invoke);
                if blocked {
                    continue;
                }
                let before = map.clone();
                let ret = match ops[i].op {
                    Op::Insert(k, v) => Ret::Update(OpResult::for_insert(map.insert(k, v))),
                    Op::Delete(k) => Ret::Update(OpResult::for_delete(map.remove(&k))),
                    Op::Search(k) => Ret::Found(map.get(&k).copied()),
                    Op::Range(lo, hi) => Ret::Range(map.range(lo..=hi).map(|(&k, &v)| (k, v)).collect()),
                };
                if Some(&ret) == ops[i].ret.as_ref() {
                    done[i] = true;
                    if go(ops, done, map) {
                        return true;
                    }
                    done[i] = false;
                }
                *map = before;
            }
            false
        }
        go(ops, &mut vec![false; ops.len()], &mut BTreeMap::new())
    }

    #[test]
    fn checker_accepts_every_locked_map_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 0..10_000 {
            let threads = rng.gen_range(1..=MAX_THREADS);
            let per = MAX_OPS / threads;
            let h = locked_map_history(&mut rng, threads, per, 8, 4);
            let v = check_linearizable(&h).unwrap();
            assert!(v.is_linearizable(), "history {n}: {h:#?}");
        }
    }

    #[test]
    fn forged_results_are_always_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..2000 {
            let h = locked_map_history(&mut rng, 3, 6, 8, 4);
            let bad = tamper(&h, Mutation::Forged, &mut rng).unwrap();
            assert!(!check_linearizable(&bad).unwrap().is_linearizable());
        }
    }

    #[test]
    fn plausible_mutations_agree_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (mut rejected, mut total) = (0, 0);
        for _ in 0..3000 {
            let h = locked_map_history(&mut rng, 3, 3, 4, 3);
            let Some(bad) = tamper(&h, Mutation::Plausible, &mut rng) else {
                continue;
            };
            let want = brute_force(&operations(&bad).unwrap());
            let got = check_linearizable(&bad).unwrap().is_linearizable();
            assert_eq!(got, want, "{bad:#?}");
            total += 1;
            rejected += !got as usize;
        }
        // Most single-result changes are detectable; some land on another legal outcome.
        assert!(rejected * 2 > total, "{rejected}/{total}");
        assert!(rejected < total);
    }
}
