//! Verification runs: linearizability campaigns and windowed stress with snapshot checks.

use std::time::Instant;

use anyhow::{bail, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value as Json};

use wftree::verify::campaign::record_history;
use wftree::verify::lincheck::{tamper, Mutation};
use wftree::verify::{check_linearizable, stress, CampaignConfig, StressConfig, Verdict};

use crate::params::{Params, Workload};

/// Outcome of a verify run: metrics for the report and everything that went wrong.
pub struct Run {
    pub metrics: Json,
    pub violations: Vec<String>,
}

#[derive(Serialize)]
struct LincheckMetrics {
    histories: usize,
    linearizable: usize,
    overlapping: usize,
    slow_path_entries: i64,
    hooks_active: bool,
    fault_injected: bool,
    elapsed_s: f64,
}

pub fn reject_mix_flags(p: &Params) -> Result<()> {
    if [p.reads, p.inserts, p.deletes, p.rq].iter().any(Option::is_some) {
        bail!("lincheck draws its own mix (40% insert, 20% delete, 20% search, 20% range); drop the mix flags");
    }
    Ok(())
}

pub fn lincheck(w: &Workload, histories: usize, inject_fault: bool, preempt: u32, force_slow: u32) -> Result<Run> {
    w.tree().validate()?;
    w.wf().validate()?;
    let ops = w.ops_per_thread.unwrap_or(6) as usize;
    let cfg = CampaignConfig {
        histories,
        threads: w.threads,
        ops_per_thread: ops,
        keyspace: w.keyspace,
        max_width: w.rq_size,
        seed: w.seed,
        tree: w.tree(),
        wf: w.wf(),
        preempt,
        force_slow,
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let mut m = LincheckMetrics {
        histories,
        linearizable: 0,
        overlapping: 0,
        slow_path_entries: 0,
        hooks_active: false,
        fault_injected: inject_fault,
        elapsed_s: 0.0,
    };
    let mut violations = Vec::new();
    for n in 0..histories {
        let (mut h, slow, hooks) = record_history(&cfg, n)?;
        m.slow_path_entries += slow;
        m.hooks_active = hooks;
        if inject_fault {
            h = tamper(&h, Mutation::Forged, &mut rng).unwrap_or(h);
        }
        if overlaps(&h) {
            m.overlapping += 1;
        }
        match check_linearizable(&h) {
            Ok(Verdict::Linearizable { .. }) => m.linearizable += 1,
            Ok(Verdict::NotLinearizable { prefix }) => {
                if violations.len() < 16 {
                    violations.push(format!("history {n} not linearizable; violating prefix: {prefix:?}"));
                }
            }
            Err(e) => violations.push(format!("history {n}: {e}")),
        }
    }
    m.elapsed_s = start.elapsed().as_secs_f64();
    if m.linearizable != histories && violations.is_empty() {
        violations.push(format!("{} of {histories} histories linearizable", m.linearizable));
    }
    Ok(Run {
        metrics: serde_json::to_value(m)?,
        violations,
    })
}

fn overlaps(h: &[wftree::verify::HistoryEvent]) -> bool {
    let mut open = 0i32;
    h.iter().any(|e| {
        open += if e.kind == wftree::verify::EventKind::Invoke {
            1
        } else {
            -1
        };
        open > 1
    })
}

pub fn stress_run(w: &Workload, window: u64, preempt: u32, force_slow: u32, need_snapshots: bool) -> Result<Run> {
    w.validate()?;
    if need_snapshots && w.rq == 0.0 {
        bail!("snapshot verification needs range queries; set --rq above 0");
    }
    let cfg = StressConfig {
        threads: w.threads,
        ops_per_thread: w.ops_per_thread.unwrap_or(0),
        duration: w.ops_per_thread.is_none().then(|| w.duration()),
        window_ops: window,
        window_time: std::time::Duration::from_secs(1),
        keyspace: w.keyspace,
        prefill: w.prefill,
        mix: w.mix(),
        rq_size: w.rq_size,
        seed: w.seed,
        tree: w.tree(),
        wf: w.wf(),
        check_snapshots: true,
        preempt,
        force_slow,
    };
    let r = stress(&cfg)?;
    let mut violations = r.violations.clone();
    if need_snapshots && r.snapshots_checked == 0 {
        violations.push("no range query completed, nothing was checked".into());
    }
    let c = &r.counters;
    let metrics = json!({
        "ops": r.ops,
        "per_thread_ops": r.per_thread_ops,
        "elapsed_s": r.elapsed.as_secs_f64(),
        "windows": r.windows,
        "range_queries": r.range_queries,
        "snapshots_checked": r.snapshots_checked,
        "live_keys": r.final_stats.live_keys,
        "depth": r.final_stats.depth,
        "worst_version_ratio": r.worst_version_ratio(),
        "splits": c.splits,
        "merges": c.merges,
        "borrows": c.borrows,
        "restarts": c.restarts,
        "search_restarts": c.search_restarts,
        "fast_path_ops": c.fast_path_ops,
        "slow_path_entries": c.slow_path_entries,
        "helped_ops": c.helped_ops,
        "max_attempts": c.max_attempts,
        "leaked_objects": r.leaked.version_nodes + r.leaked.key_nodes + r.leaked.leaves + r.leaked.internals + r.leaked.states,
        "hooks_active": r.hooks_active,
    });
    Ok(Run { metrics, violations })
}
