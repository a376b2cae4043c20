//! Range query results against the effect log.

use std::collections::BTreeMap;

use super::oracle::{Effect, Replay};
use crate::types::{Key, Timestamp, Value};

/// A range query as it returned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RangeRecord {
    pub low: Key,
    pub high: Key,
    pub snapshot: Timestamp,
    pub result: Vec<(Key, Value)>,
}

#[derive(Clone, Debug, Default)]
pub struct SnapshotReport {
    pub checked: usize,
    pub violations: Vec<String>,
    /// Map state after every effect, for chaining windows.
    pub final_state: BTreeMap<Key, Value>,
}

impl SnapshotReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Every range query must return exactly the log's reconstruction at its snapshot, restricted
/// to its bounds.
pub fn snapshot_check(run_log: &[Effect], rq_results: &[RangeRecord]) -> SnapshotReport {
    snapshot_check_from(BTreeMap::new(), run_log, rq_results)
}

/// As [`snapshot_check`], for a log whose effects all come after the state `base`.
pub fn snapshot_check_from(
    base: BTreeMap<Key, Value>,
    run_log: &[Effect],
    rq_results: &[RangeRecord],
) -> SnapshotReport {
    let mut replay = Replay::new(base, run_log.to_vec());
    let mut rqs: Vec<&RangeRecord> = rq_results.iter().collect();
    rqs.sort_by_key(|r| r.snapshot);
    let mut report = SnapshotReport::default();
    for r in rqs {
        replay.advance_to(r.snapshot);
        let want: Vec<(Key, Value)> = replay.state().range(r.low..=r.high).map(|(&k, &v)| (k, v)).collect();
        report.checked += 1;
        if want != r.result && report.violations.len() < 32 {
            report.violations.push(describe(r, &want));
        }
    }
    replay.advance_to(Timestamp::MAX);
    report.violations.extend(replay.anomalies().iter().take(32).cloned());
    report.final_state = replay.into_state();
    report
}

fn describe(r: &RangeRecord, want: &[(Key, Value)]) -> String {
    let got: BTreeMap<_, _> = r.result.iter().copied().collect();
    let exp: BTreeMap<_, _> = want.iter().copied().collect();
    let mut diff = Vec::new();
    for (k, v) in &exp {
        match got.get(k) {
            None => diff.push(format!("missing {k}={v}")),
            Some(g) if g != v => diff.push(format!("{k}={g}, expected {v}")),
            _ => {}
        }
    }
    for (k, v) in &got {
        if !exp.contains_key(k) {
            diff.push(format!("extra {k}={v}"));
        }
    }
    if diff.is_empty() {
        diff.push("result not sorted or has duplicates".into());
    }
    diff.truncate(4);
    format!(
        "range [{}, {}] at snapshot {}: {}",
        r.low,
        r.high,
        r.snapshot,
        diff.join(", ")
    )
}
