//! Keys, values, timestamps, operation results and tagged links.

use crossbeam_epoch::{Atomic, Shared};

pub type Key = u64;
pub type Value = u64;
pub type Timestamp = i64;

/// Key of the head sentinel of every leaf list. Rejected as a user key.
pub const KEY_NEG_INF: Key = 0;
/// Key of the tail sentinel of every leaf list. Rejected as a user key.
pub const KEY_POS_INF: Key = u64::MAX;
/// Version value meaning "deleted at this timestamp". Rejected as a user value.
pub const TOMBSTONE: Value = u64::MAX;
/// Timestamp of a version whose linearization has not been fixed yet.
pub const TS_UNSET: Timestamp = -1;
/// Timestamp of the tracker's genesis entry; the first range query gets `TS_GENESIS + 1`.
pub const TS_GENESIS: Timestamp = 1;

/// Tag bit used as the freezing mark.
pub const MARK: usize = 1;

/// An atomic link whose low bit carries the freezing mark.
///
/// All nodes are at least 8-byte aligned, so the mark never collides with the address.
pub type MarkedLink<T> = Atomic<T>;

#[inline]
pub fn mark<T>(s: Shared<'_, T>) -> Shared<'_, T> {
    s.with_tag(s.tag() | MARK)
}

#[inline]
pub fn unmark<T>(s: Shared<'_, T>) -> Shared<'_, T> {
    s.with_tag(s.tag() & !MARK)
}

#[inline]
pub fn is_marked<T>(s: Shared<'_, T>) -> bool {
    s.tag() & MARK != 0
}

#[inline]
pub fn is_tombstone(v: Value) -> bool {
    v == TOMBSTONE
}

#[inline]
pub fn is_user_key(k: Key) -> bool {
    k != KEY_NEG_INF && k != KEY_POS_INF
}

#[inline]
pub fn is_user_value(v: Value) -> bool {
    v != TOMBSTONE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    NewKeyInserted,
    KeyUpdated,
    KeyNotPresent,
    /// Another thread completed this announced operation.
    OperationFinished,
    /// Internal: the target node is frozen, rebalance and retry.
    Failed,
}

/// Result of an update.
///
/// `value` is the value the key held before the update, when it held one:
/// `KeyUpdated` from an insert or delete carries the previous value, the other kinds carry `None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OpResult {
    pub kind: OpKind,
    pub value: Option<Value>,
}

impl OpResult {
    pub const fn new(kind: OpKind, value: Option<Value>) -> Self {
        Self { kind, value }
    }

    pub const fn inserted() -> Self {
        Self::new(OpKind::NewKeyInserted, None)
    }

    pub const fn updated(old: Value) -> Self {
        Self::new(OpKind::KeyUpdated, Some(old))
    }

    pub const fn not_present() -> Self {
        Self::new(OpKind::KeyNotPresent, None)
    }

    pub const fn finished() -> Self {
        Self::new(OpKind::OperationFinished, None)
    }

    pub const fn failed() -> Self {
        Self::new(OpKind::Failed, None)
    }

    pub fn is_failed(&self) -> bool {
        self.kind == OpKind::Failed
    }

    /// Result of an insert given the value the key held just before it (`None` if absent).
    pub fn for_insert(prior: Option<Value>) -> Self {
        match prior {
            Some(v) if !is_tombstone(v) => Self::updated(v),
            _ => Self::inserted(),
        }
    }

    /// Result of a delete given the value the key held just before it (`None` if absent).
    pub fn for_delete(prior: Option<Value>) -> Self {
        match prior {
            Some(v) if !is_tombstone(v) => Self::updated(v),
            _ => Self::not_present(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("key {0} is a reserved sentinel")]
    ReservedKey(Key),
    #[error("value {0:#x} is reserved for tombstones")]
    ReservedValue(Value),
    #[error("empty range: low {low} > high {high}")]
    InvalidRange { low: Key, high: Key },
    #[error("all {0} thread slots are registered")]
    NoFreeSlot(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub(crate) fn check_key(k: Key) -> Result<(), Error> {
    if is_user_key(k) {
        Ok(())
    } else {
        Err(Error::ReservedKey(k))
    }
}

pub(crate) fn check_value(v: Value) -> Result<(), Error> {
    if is_user_value(v) {
        Ok(())
    } else {
        Err(Error::ReservedValue(v))
    }
}
