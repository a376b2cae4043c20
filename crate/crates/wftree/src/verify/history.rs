//! Concurrent history recording.

use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use crate::types::{Error, Key, OpResult, Value};
use crate::waitfree::Handle;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Insert(Key, Value),
    Delete(Key),
    Search(Key),
    Range(Key, Key),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Ret {
    Update(OpResult),
    Found(Option<Value>),
    Range(Vec<(Key, Value)>),
}

impl Op {
    pub fn run(&self, h: &mut Handle<'_>) -> Result<Ret, Error> {
        Ok(match *self {
            Op::Insert(k, v) => Ret::Update(h.insert(k, v)?),
            Op::Delete(k) => Ret::Update(h.delete(k)?),
            Op::Search(k) => Ret::Found(h.search(k)?),
            Op::Range(lo, hi) => Ret::Range(h.range_query(lo, hi)?),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Invoke,
    Respond,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryEvent {
    pub thread: usize,
    pub kind: EventKind,
    pub op: Op,
    /// Set on `Respond` events.
    pub ret: Option<Ret>,
    pub seq: u64,
}

/// Hands out a global order to events recorded by many threads.
#[derive(Default)]
pub struct Recorder {
    seq: AtomicU64,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn thread(&self, thread: usize) -> ThreadLog<'_> {
        ThreadLog {
            rec: self,
            thread,
            events: Vec::new(),
        }
    }

    /// Merges per-thread logs into one history ordered by sequence number.
    pub fn merge(logs: impl IntoIterator<Item = Vec<HistoryEvent>>) -> Vec<HistoryEvent> {
        let mut all: Vec<_> = logs.into_iter().flatten().collect();
        all.sort_by_key(|e| e.seq);
        all
    }
}

/// One thread's events; single writer, so recording takes no lock.
pub struct ThreadLog<'a> {
    rec: &'a Recorder,
    thread: usize,
    events: Vec<HistoryEvent>,
}

impl ThreadLog<'_> {
    /// Records the invocation, runs `f`, records the response.
    pub fn call<E>(&mut self, op: Op, f: impl FnOnce(&Op) -> Result<Ret, E>) -> Result<Ret, E> {
        self.events.push(HistoryEvent {
            thread: self.thread,
            kind: EventKind::Invoke,
            op: op.clone(),
            ret: None,
            seq: self.rec.seq.fetch_add(1, SeqCst),
        });
        let ret = f(&op)?;
        self.events.push(HistoryEvent {
            thread: self.thread,
            kind: EventKind::Respond,
            op,
            ret: Some(ret.clone()),
            seq: self.rec.seq.fetch_add(1, SeqCst),
        });
        Ok(ret)
    }

    pub fn into_events(self) -> Vec<HistoryEvent> {
        self.events
    }
}
