//! Multi-threaded churn with post-quiescence checks.
//!
//! The run is cut into windows. Inside a window threads run a seeded operation mix; between
//! windows every thread has stopped, so the structure is validated, range queries are checked
//! against the window's effect log, the quiescent contents are compared with the replayed
//! state and memory is counted.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering::Relaxed};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::Effect;
use super::snapshot::{snapshot_check_from, RangeRecord};
use crate::reclaim::{collect, MemSnapshot};
use crate::tree::{TreeConfig, TreeStats};
use crate::types::*;
use crate::waitfree::{WaitFreeConfig, WfTree};

/// Operation mix in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mix {
    pub read: f64,
    pub insert: f64,
    pub delete: f64,
    pub rq: f64,
}

impl Mix {
    pub const fn new(read: f64, insert: f64, delete: f64, rq: f64) -> Self {
        Self {
            read,
            insert,
            delete,
            rq,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let parts = [self.read, self.insert, self.delete, self.rq];
        if parts.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(Error::Config(format!(
                "operation shares must lie in [0, 100]: {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 100.0).abs() > 1e-6 {
            return Err(Error::Config(format!("operation mix sums to {sum}, not 100")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpChoice {
    Read,
    Insert,
    Delete,
    Range,
}

impl Mix {
    pub fn pick(&self, rng: &mut impl Rng) -> OpChoice {
        let r = rng.gen_range(0.0..100.0);
        if r < self.read {
            OpChoice::Read
        } else if r < self.read + self.insert {
            OpChoice::Insert
        } else if r < self.read + self.insert + self.delete {
            OpChoice::Delete
        } else {
            OpChoice::Range
        }
    }
}

#[derive(Clone, Debug)]
pub struct StressConfig {
    pub threads: usize,
    /// Operations per thread over the whole run; 0 leaves the run to `duration`.
    pub ops_per_thread: u64,
    pub duration: Option<Duration>,
    /// Operations per thread in one window.
    pub window_ops: u64,
    /// Longest a window of a timed run may last.
    pub window_time: Duration,
    pub keyspace: u64,
    pub prefill: u64,
    pub mix: Mix,
    pub rq_size: u64,
    pub seed: u64,
    pub tree: TreeConfig,
    pub wf: WaitFreeConfig,
    pub check_snapshots: bool,
    /// With `test-hooks`: threads yield at one in this many pause points (0 = never).
    pub preempt: u32,
    /// With `test-hooks`: one in this many fast-path attempts is failed (0 = never).
    pub force_slow: u32,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            threads: 2,
            ops_per_thread: 1000,
            duration: None,
            window_ops: 1000,
            window_time: Duration::from_secs(1),
            keyspace: 1000,
            prefill: 500,
            mix: Mix::new(40.0, 25.0, 25.0, 10.0),
            rq_size: 32,
            seed: 1,
            tree: TreeConfig::default(),
            wf: WaitFreeConfig::default(),
            check_snapshots: true,
            preempt: 0,
            force_slow: 0,
        }
    }
}

impl StressConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.mix.validate()?;
        self.tree.validate()?;
        self.wf.validate()?;
        if self.threads == 0 || self.threads > self.wf.max_threads {
            return Err(Error::Config(format!("threads must be in 1..={}", self.wf.max_threads)));
        }
        if self.keyspace == 0 || self.prefill > self.keyspace {
            return Err(Error::Config("need 0 < keyspace and prefill <= keyspace".into()));
        }
        if self.ops_per_thread == 0 && self.duration.is_none() {
            return Err(Error::Config("set ops_per_thread or duration".into()));
        }
        if self.window_ops == 0 || self.rq_size == 0 {
            return Err(Error::Config("window_ops and rq_size must be positive".into()));
        }
        Ok(())
    }
}

/// Measurements taken at one window boundary, after reclamation caught up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Wave {
    pub live_keys: usize,
    /// Versions reachable from the tree.
    pub versions: usize,
    /// Version nodes allocated and not yet freed, garbage included.
    pub allocated_versions: i64,
    pub splits: i64,
    pub merges: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StressCounters {
    pub search_restarts: i64,
    pub restarts: i64,
    pub splits: i64,
    pub merges: i64,
    pub borrows: i64,
    pub copies: i64,
    pub helps: i64,
    pub locality_deferrals: i64,
    pub fast_path_ops: i64,
    pub slow_path_entries: i64,
    pub helped_ops: i64,
    pub max_attempts: u64,
}

#[derive(Clone, Debug, Default)]
pub struct StressReport {
    pub ops: u64,
    pub per_thread_ops: Vec<u64>,
    pub elapsed: Duration,
    pub windows: usize,
    pub range_queries: u64,
    pub snapshots_checked: usize,
    pub violations: Vec<String>,
    pub waves: Vec<Wave>,
    pub final_stats: TreeStats,
    pub counters: StressCounters,
    /// Objects still allocated after the store was dropped and reclamation ran.
    pub leaked: MemSnapshot,
    pub hooks_active: bool,
}

impl StressReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Largest ratio of allocated versions to live keys over all waves.
    pub fn worst_version_ratio(&self) -> f64 {
        self.waves
            .iter()
            .map(|w| w.allocated_versions as f64 / w.live_keys.max(1) as f64)
            .fold(0.0, f64::max)
    }
}

/// Independent stream for thread `t` in window `w`.
pub fn stream_seed(seed: u64, t: usize, w: usize) -> u64 {
    let mut x = seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (w as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

#[derive(Default)]
struct ThreadOut {
    ops: u64,
    effects: Vec<Effect>,
    rqs: Vec<RangeRecord>,
    errors: Vec<String>,
}

pub fn stress(cfg: &StressConfig) -> Result<StressReport, Error> {
    cfg.validate()?;
    let t = WfTree::with_config(cfg.tree.clone(), cfg.wf.clone())?;
    let stats = t.tree().ctx().stats.clone();
    let mut report = StressReport {
        per_thread_ops: vec![0; cfg.threads],
        hooks_active: super::perturb(&t, cfg.preempt, cfg.force_slow),
        ..Default::default()
    };

    let mut base = BTreeMap::new();
    {
        let mut h = t.register()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for k in rand::seq::index::sample(&mut rng, cfg.keyspace as usize, cfg.prefill as usize) {
            let k = k as u64 + 1;
            h.insert(k, k)?;
            base.insert(k, k);
        }
    }

    let start = Instant::now();
    let deadline = cfg.duration.map(|d| start + d);
    let mut done = 0u64;
    loop {
        let quota = match cfg.ops_per_thread {
            0 => cfg.window_ops,
            n => cfg.window_ops.min(n - done),
        };
        if quota == 0 || deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        let w = report.windows;
        let stop = AtomicBool::new(false);
        // Only timed runs cut windows short, so op-count runs stay reproducible.
        let window_end = deadline.map(|d| d.min(Instant::now() + cfg.window_time));
        let outs: Vec<ThreadOut> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..cfg.threads)
                .map(|i| {
                    let (t, stop) = (&t, &stop);
                    s.spawn(move || worker(t, cfg, i, w, quota, stop))
                })
                .collect();
            while !hs.iter().all(|h| h.is_finished()) {
                if window_end.is_some_and(|e| Instant::now() >= e) {
                    stop.store(true, Relaxed);
                }
                std::thread::sleep(Duration::from_millis(1));
            }
            hs.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        report.windows += 1;
        done = done.saturating_add(quota);

        let mut effects = Vec::new();
        let mut rqs = Vec::new();
        for (i, o) in outs.into_iter().enumerate() {
            report.per_thread_ops[i] += o.ops;
            report.ops += o.ops;
            report.range_queries += o.rqs.len() as u64;
            effects.extend(o.effects);
            rqs.extend(o.rqs);
            report
                .violations
                .extend(o.errors.into_iter().map(|e| format!("window {w}: {e}")));
        }

        let s = t.tree().validate_structure();
        report
            .violations
            .extend(s.violations.iter().map(|v| format!("window {w}: structure: {v}")));
        if cfg.check_snapshots {
            let snap = snapshot_check_from(std::mem::take(&mut base), &effects, &rqs);
            report.snapshots_checked += snap.checked;
            report
                .violations
                .extend(snap.violations.iter().map(|v| format!("window {w}: snapshot: {v}")));
            let now = t.tree().range_query(KEY_NEG_INF + 1, KEY_POS_INF - 1)?;
            let want: Vec<_> = snap.final_state.iter().map(|(&k, &v)| (k, v)).collect();
            if now != want {
                report.violations.push(format!(
                    "window {w}: quiescent contents ({} keys) differ from the replayed log ({} keys)",
                    now.len(),
                    want.len()
                ));
            }
            base = snap.final_state;
        }
        for _ in 0..8 {
            collect();
        }
        report.waves.push(Wave {
            live_keys: s.stats.live_keys,
            versions: s.stats.versions,
            allocated_versions: stats.version_nodes.get(),
            splits: t.tree().counters().splits.get(),
            merges: t.tree().counters().merges.get(),
        });
    }
    report.elapsed = start.elapsed();
    report.final_stats = t.tree().stats();

    let (c, w) = (t.tree().counters(), t.counters());
    report.counters = StressCounters {
        search_restarts: c.search_restarts.get(),
        restarts: c.restarts.get(),
        splits: c.splits.get(),
        merges: c.merges.get(),
        borrows: c.borrows.get(),
        copies: c.copies.get(),
        helps: c.helps.get(),
        locality_deferrals: c.locality_deferrals.get(),
        fast_path_ops: w.fast_path_ops.get(),
        slow_path_entries: w.slow_path_entries.get(),
        helped_ops: w.helped_ops.get(),
        max_attempts: w.max_attempts.load(Relaxed),
    };
    if report.counters.search_restarts != 0 {
        report
            .violations
            .push(format!("searches restarted {} times", report.counters.search_restarts));
    }

    drop(t);
    for _ in 0..64 {
        collect();
        let m = stats.snapshot();
        if m.version_nodes == 0 && m.key_nodes == 0 && m.leaves == 0 && m.internals == 0 && m.states == 0 {
            break;
        }
        std::thread::yield_now();
    }
    report.leaked = stats.snapshot();
    let l = report.leaked;
    if (l.version_nodes, l.key_nodes, l.leaves, l.internals, l.states) != (0, 0, 0, 0, 0) {
        report.violations.push(format!("objects left after drop: {l:?}"));
    }
    Ok(report)
}

fn worker(t: &WfTree, cfg: &StressConfig, i: usize, w: usize, quota: u64, stop: &AtomicBool) -> ThreadOut {
    let mut out = ThreadOut::default();
    let mut h = match t.register() {
        Ok(h) => h,
        Err(e) => {
            out.errors.push(e.to_string());
            return out;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, i, w));
    // Values are unique per write so effect chains never revisit a value.
    let mut next_value = ((i as u64 + 1) << 48) | ((w as u64) << 32);
    let record = cfg.check_snapshots;
    while out.ops < quota && !stop.load(Relaxed) {
        let k = rng.gen_range(1..=cfg.keyspace);
        let r = match cfg.mix.pick(&mut rng) {
            OpChoice::Read => h.search(k).map(|_| ()),
            OpChoice::Insert => {
                next_value += 1;
                h.insert_traced(k, next_value).map(|(r, ts)| {
                    if record {
                        out.effects.extend(Effect::of_insert(k, next_value, r, ts));
                    }
                })
            }
            OpChoice::Delete => h.delete_traced(k).map(|(r, ts)| {
                if record {
                    out.effects.extend(Effect::of_delete(k, r, ts));
                }
            }),
            OpChoice::Range => {
                let hi = k.saturating_add(cfg.rq_size - 1).min(KEY_POS_INF - 1);
                h.range_query_traced(k, hi).map(|(result, snapshot)| {
                    if record {
                        out.rqs.push(RangeRecord {
                            low: k,
                            high: hi,
                            snapshot,
                            result,
                        });
                    }
                })
            }
        };
        if let Err(e) = r {
            out.errors.push(e.to_string());
            break;
        }
        out.ops += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_two_threads() {
        let r = stress(&StressConfig {
            tree: TreeConfig::with_sizes(4, 2, 4, 2),
            keyspace: 200,
            prefill: 100,
            ..Default::default()
        })
        .unwrap();
        assert!(r.is_ok(), "{:?}", r.violations);
        assert_eq!(r.ops, 2000);
        assert_eq!(r.per_thread_ops, vec![1000, 1000]);
        assert!(r.snapshots_checked > 0);
        assert_eq!(r.counters.search_restarts, 0);
    }

    #[test]
    fn windows_chain_snapshots() {
        let r = stress(&StressConfig {
            threads: 3,
            ops_per_thread: 3000,
            window_ops: 700,
            tree: TreeConfig::with_sizes(4, 2, 8, 2),
            keyspace: 300,
            prefill: 150,
            mix: Mix::new(20.0, 35.0, 35.0, 10.0),
            preempt: 4,
            force_slow: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(r.is_ok(), "{:?}", r.violations);
        assert_eq!(r.windows, 5);
        assert_eq!(r.waves.len(), 5);
        if r.hooks_active {
            assert!(r.counters.slow_path_entries > 0);
        }
    }

    #[test]
    fn timed_run_with_unbounded_windows() {
        let r = stress(&StressConfig {
            ops_per_thread: 0,
            duration: Some(Duration::from_millis(300)),
            window_ops: u64::MAX,
            window_time: Duration::from_millis(100),
            ..Default::default()
        })
        .unwrap();
        assert!(r.is_ok(), "{:?}", r.violations);
        assert!(r.windows >= 2 && r.ops > 0, "{} windows, {} ops", r.windows, r.ops);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = StressConfig {
            mix: Mix::new(50.0, 50.0, 50.0, 0.0),
            ..Default::default()
        };
        assert!(stress(&bad).is_err());
        let bad = StressConfig {
            prefill: 2000,
            ..Default::default()
        };
        assert!(stress(&bad).is_err());
    }

    #[test]
    fn same_seed_same_single_thread_outcome() {
        let cfg = StressConfig {
            threads: 1,
            ops_per_thread: 3000,
            seed: 9,
            ..Default::default()
        };
        let (a, b) = (stress(&cfg).unwrap(), stress(&cfg).unwrap());
        assert!(a.is_ok() && b.is_ok());
        assert_eq!(a.final_stats, b.final_stats);
        assert_eq!(a.range_queries, b.range_queries);
    }
}
