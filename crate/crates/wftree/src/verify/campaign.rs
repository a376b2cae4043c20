//! Recorded histories from the store, fed to the linearizability checker.

use std::sync::Barrier;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::history::{HistoryEvent, Op, Recorder};
use super::lincheck::{check_linearizable, random_op, Verdict};
use super::stress::stream_seed;
use crate::tree::TreeConfig;
use crate::types::Error;
use crate::waitfree::{WaitFreeConfig, WfTree};

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    pub histories: usize,
    pub threads: usize,
    pub ops_per_thread: usize,
    pub keyspace: u64,
    pub max_width: u64,
    pub seed: u64,
    pub tree: TreeConfig,
    pub wf: WaitFreeConfig,
    /// See [`super::stress::StressConfig::preempt`].
    pub preempt: u32,
    pub force_slow: u32,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            histories: 1000,
            threads: 3,
            ops_per_thread: 6,
            keyspace: 8,
            max_width: 4,
            seed: 1,
            // Small nodes so a handful of keys already splits and merges.
            tree: TreeConfig::with_sizes(4, 2, 4, 2),
            wf: WaitFreeConfig {
                fast_path_retries: 2,
                helping_period: 1,
                max_threads: 8,
            },
            preempt: 3,
            force_slow: 4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CampaignReport {
    pub histories: usize,
    pub linearizable: usize,
    /// Index and minimal violating prefix of each failing history.
    pub failures: Vec<(usize, Vec<HistoryEvent>)>,
    pub errors: Vec<String>,
    /// Histories in which at least two operations overlapped in real time.
    pub overlapping: usize,
    pub slow_path_entries: i64,
    pub hooks_active: bool,
}

impl CampaignReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty() && self.errors.is_empty() && self.linearizable == self.histories
    }
}

/// Runs one history on a fresh store.
pub fn record_history(cfg: &CampaignConfig, n: usize) -> Result<(Vec<HistoryEvent>, i64, bool), Error> {
    let t = WfTree::with_config(cfg.tree.clone(), cfg.wf.clone())?;
    let hooks = super::perturb(&t, cfg.preempt, cfg.force_slow);
    let scripts: Vec<Vec<Op>> = (0..cfg.threads)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, i, n));
            (0..cfg.ops_per_thread)
                .map(|_| random_op(&mut rng, cfg.keyspace, 9, cfg.max_width))
                .collect()
        })
        .collect();
    let rec = Recorder::new();
    let start = Barrier::new(cfg.threads);
    let logs: Result<Vec<_>, Error> = std::thread::scope(|s| {
        let hs: Vec<_> = scripts
            .iter()
            .enumerate()
            .map(|(i, script)| {
                let (t, rec, start) = (&t, &rec, &start);
                s.spawn(move || {
                    let mut h = t.register()?;
                    let mut log = rec.thread(i);
                    start.wait();
                    for op in script {
                        log.call(op.clone(), |op| op.run(&mut h))?;
                    }
                    Ok(log.into_events())
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("client panicked")).collect()
    });
    let slow = t.counters().slow_path_entries.get();
    Ok((Recorder::merge(logs?), slow, hooks))
}

fn overlaps(h: &[HistoryEvent]) -> bool {
    let mut open = 0;
    for e in h {
        match e.kind {
            super::history::EventKind::Invoke => {
                open += 1;
                if open > 1 {
                    return true;
                }
            }
            super::history::EventKind::Respond => open -= 1,
        }
    }
    false
}

pub fn lincheck_campaign(cfg: &CampaignConfig) -> CampaignReport {
    let mut r = CampaignReport::default();
    for n in 0..cfg.histories {
        r.histories += 1;
        let (h, slow, hooks) = match record_history(cfg, n) {
            Ok(x) => x,
            Err(e) => {
                r.errors.push(format!("history {n}: {e}"));
                continue;
            }
        };
        r.slow_path_entries += slow;
        r.hooks_active = hooks;
        r.overlapping += overlaps(&h) as usize;
        match check_linearizable(&h) {
            Ok(Verdict::Linearizable { .. }) => r.linearizable += 1,
            Ok(Verdict::NotLinearizable { prefix }) => r.failures.push((n, prefix)),
            Err(e) => r.errors.push(format!("history {n}: {e}")),
        }
    }
    r
}
