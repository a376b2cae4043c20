//! Throughput runs: uniform prefill, then worker threads drawing from a seeded operation mix.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, Ordering::Relaxed};
use std::sync::Barrier;
use std::time::Instant;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use wftree::types::KEY_POS_INF;
use wftree::verify::stress::{stream_seed, OpChoice};
use wftree::WfTree;

use crate::params::Workload;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OpCounts {
    pub reads: u64,
    pub inserts: u64,
    pub deletes: u64,
    pub range_queries: u64,
    /// Keys returned by all range queries.
    pub range_keys: u64,
}

impl OpCounts {
    fn total(&self) -> u64 {
        self.reads + self.inserts + self.deletes + self.range_queries
    }

    fn add(&mut self, o: &OpCounts) {
        self.reads += o.reads;
        self.inserts += o.inserts;
        self.deletes += o.deletes;
        self.range_queries += o.range_queries;
        self.range_keys += o.range_keys;
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Throughput {
    pub total: f64,
    pub reads: f64,
    pub inserts: f64,
    pub deletes: f64,
    pub range_queries: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Memory {
    /// Objects retired to the reclaimer over the run.
    pub retired: i64,
    /// Objects allocated and not yet freed when the run ended, garbage included.
    pub live_version_nodes: i64,
    pub live_key_nodes: i64,
    pub live_leaves: i64,
    pub live_internals: i64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BenchMetrics {
    pub elapsed_s: f64,
    pub ops: OpCounts,
    pub per_thread_ops: Vec<u64>,
    /// Operations per second.
    pub throughput: Throughput,
    pub fast_path_ops: i64,
    pub slow_path_entries: i64,
    pub helped_ops: i64,
    pub max_attempts: u64,
    pub splits: i64,
    pub merges: i64,
    pub borrows: i64,
    pub restarts: i64,
    pub search_restarts: i64,
    pub memory: Memory,
    pub live_keys: usize,
    pub depth: usize,
    /// Hash of the generated operations, thread by thread.
    pub stream_hash: String,
    /// Hash of the operation results, thread by thread. Reproducible for one thread and --ops.
    pub result_hash: String,
}

#[derive(Default)]
struct Worker {
    counts: OpCounts,
    stream: u64,
    results: u64,
    error: Option<String>,
}

pub fn run_bench(w: &Workload) -> Result<(BenchMetrics, Vec<String>)> {
    w.validate()?;
    let t = WfTree::with_config(w.tree(), w.wf())?;
    {
        let mut h = t.register()?;
        let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
        for k in rand::seq::index::sample(&mut rng, w.keyspace as usize, w.prefill as usize) {
            let k = k as u64 + 1;
            h.insert(k, k)?;
        }
    }
    let retired_before = t.tree().ctx().stats.retired.get();

    let stop = AtomicBool::new(false);
    let start = Barrier::new(w.threads + 1);
    let (outs, elapsed) = std::thread::scope(|s| {
        let hs: Vec<_> = (0..w.threads)
            .map(|i| {
                let (t, stop, start) = (&t, &stop, &start);
                s.spawn(move || worker(t, w, i, stop, start))
            })
            .collect();
        start.wait();
        let begin = Instant::now();
        if w.ops_per_thread.is_none() {
            let end = begin + w.duration();
            while Instant::now() < end && !hs.iter().all(|h| h.is_finished()) {
                std::thread::sleep((end - Instant::now()).min(std::time::Duration::from_millis(20)));
            }
            stop.store(true, Relaxed);
        }
        let outs: Vec<Worker> = hs.into_iter().map(|h| h.join().expect("worker panicked")).collect();
        (outs, begin.elapsed())
    });

    let mut violations = Vec::new();
    let mut m = BenchMetrics {
        elapsed_s: elapsed.as_secs_f64(),
        ..Default::default()
    };
    let (mut stream, mut results) = (DefaultHasher::new(), DefaultHasher::new());
    for (i, o) in outs.iter().enumerate() {
        m.ops.add(&o.counts);
        m.per_thread_ops.push(o.counts.total());
        o.stream.hash(&mut stream);
        o.results.hash(&mut results);
        if let Some(e) = &o.error {
            violations.push(format!("thread {i}: {e}"));
        }
    }
    m.stream_hash = format!("{:016x}", stream.finish());
    m.result_hash = format!("{:016x}", results.finish());
    let per_s = |n: u64| n as f64 / m.elapsed_s.max(1e-9);
    m.throughput = Throughput {
        total: per_s(m.ops.total()),
        reads: per_s(m.ops.reads),
        inserts: per_s(m.ops.inserts),
        deletes: per_s(m.ops.deletes),
        range_queries: per_s(m.ops.range_queries),
    };

    let (c, wc) = (t.tree().counters(), t.counters());
    m.fast_path_ops = wc.fast_path_ops.get();
    m.slow_path_entries = wc.slow_path_entries.get();
    m.helped_ops = wc.helped_ops.get();
    m.max_attempts = wc.max_attempts.load(Relaxed);
    m.splits = c.splits.get();
    m.merges = c.merges.get();
    m.borrows = c.borrows.get();
    m.restarts = c.restarts.get();
    m.search_restarts = c.search_restarts.get();
    if m.search_restarts != 0 {
        violations.push(format!("searches restarted {} times", m.search_restarts));
    }
    let mem = t.tree().ctx().stats.snapshot();
    m.memory = Memory {
        retired: mem.retired - retired_before,
        live_version_nodes: mem.version_nodes,
        live_key_nodes: mem.key_nodes,
        live_leaves: mem.leaves,
        live_internals: mem.internals,
    };
    let s = t.tree().validate_structure();
    m.live_keys = s.stats.live_keys;
    m.depth = s.stats.depth;
    violations.extend(s.violations.iter().map(|v| format!("structure: {v}")));
    Ok((m, violations))
}

fn worker(t: &WfTree, w: &Workload, i: usize, stop: &AtomicBool, start: &Barrier) -> Worker {
    let mut out = Worker::default();
    let mut h = match t.register() {
        Ok(h) => h,
        Err(e) => {
            out.error = Some(e.to_string());
            start.wait();
            return out;
        }
    };
    let mix = w.mix();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(w.seed, i, 0));
    let (mut stream, mut results) = (DefaultHasher::new(), DefaultHasher::new());
    let mut next_value = (i as u64 + 1) << 40;
    let quota = w.ops_per_thread.unwrap_or(u64::MAX);
    start.wait();
    let mut n = 0;
    while n < quota && !stop.load(Relaxed) {
        let k = rng.gen_range(1..=w.keyspace);
        let op = mix.pick(&mut rng);
        (op as u8, k).hash(&mut stream);
        let r = match op {
            OpChoice::Read => h.search(k).map(|v| {
                out.counts.reads += 1;
                v.hash(&mut results);
            }),
            OpChoice::Insert => {
                next_value += 1;
                h.insert(k, next_value).map(|r| {
                    out.counts.inserts += 1;
                    (r.kind, r.value).hash(&mut results);
                })
            }
            OpChoice::Delete => h.delete(k).map(|r| {
                out.counts.deletes += 1;
                (r.kind, r.value).hash(&mut results);
            }),
            OpChoice::Range => {
                let hi = k.saturating_add(w.rq_size - 1).min(KEY_POS_INF - 1);
                h.range_query(k, hi).map(|r| {
                    out.counts.range_queries += 1;
                    out.counts.range_keys += r.len() as u64;
                    r.hash(&mut results);
                })
            }
        };
        if let Err(e) = r {
            out.error = Some(e.to_string());
            break;
        }
        n += 1;
    }
    out.stream = stream.finish();
    out.results = results.finish();
    out
}
