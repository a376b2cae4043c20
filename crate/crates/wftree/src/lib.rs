//! Concurrent ordered key-value store with wait-free updates and snapshot range queries.
//!
//! The index is a B+tree whose internal nodes are copied on change and whose leaves hold
//! versioned lock-free lists. Updates never block: after a bounded number of failed lock-free
//! attempts an operation is announced and completed with help from other threads. Range queries
//! read a consistent snapshot by timestamp.

pub mod ctx;
pub mod hooks;
pub mod reclaim;
pub mod tracker;
pub mod tree;
pub mod types;
pub mod verify;
pub mod vlist;
pub mod waitfree;

pub use ctx::Ctx;
pub use tree::{Tree, TreeConfig};
pub use types::{Error, Key, OpKind, OpResult, Timestamp, Value};
pub use waitfree::{Handle, WaitFreeConfig, WfTree};
