//! Acceptance criteria, run in sequence with one PASS/FAIL line each.
//!
//! Criteria run one after another rather than as parallel tests so the timed and throughput
//! measurements do not compete for cores.

use std::sync::atomic::{AtomicI64, Ordering::Relaxed};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wftree::tree::TreeConfig;
use wftree::verify::schedules::{suspended_announcer, Schedule};
use wftree::verify::{
    lincheck_campaign, snapshot_check, stress, CampaignConfig, Effect, Mix, RangeRecord, SequentialOracle,
    StressConfig, StressReport,
};
use wftree::{OpResult, WaitFreeConfig, WfTree};

/// Search restarts summed over every stress run below.
static SEARCH_RESTARTS: AtomicI64 = AtomicI64::new(0);
static STRESS_RUNS: AtomicI64 = AtomicI64::new(0);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn run_stress(cfg: &StressConfig) -> Result<StressReport, String> {
    let r = stress(cfg).map_err(|e| e.to_string())?;
    SEARCH_RESTARTS.fetch_add(r.counters.search_restarts, Relaxed);
    STRESS_RUNS.fetch_add(1, Relaxed);
    if !r.is_ok() {
        return Err(format!("{} violations, first: {}", r.violations.len(), r.violations[0]));
    }
    Ok(r)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let t = WfTree::new();
    let mut h = t.register().map_err(|e| e.to_string())?;
    let mut o = SequentialOracle::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut effects, mut rqs) = (Vec::new(), Vec::new());
    for i in 0..100_000u64 {
        let k = rng.gen_range(1..=1000);
        let mismatch = match rng.gen_range(0..10) {
            0..=3 => {
                let v = rng.gen_range(1..1_000_000);
                let (r, ts) = h.insert_traced(k, v).map_err(|e| e.to_string())?;
                effects.extend(Effect::of_insert(k, v, r, ts));
                (r != o.insert(k, v)).then(|| format!("insert({k}, {v}) -> {r:?}"))
            }
            4..=6 => {
                let (r, ts) = h.delete_traced(k).map_err(|e| e.to_string())?;
                effects.extend(Effect::of_delete(k, r, ts));
                (r != o.delete(k)).then(|| format!("delete({k}) -> {r:?}"))
            }
            7..=8 => {
                let r = h.search(k).map_err(|e| e.to_string())?;
                (r != o.search(k)).then(|| format!("search({k}) -> {r:?}"))
            }
            _ => {
                let hi = k + rng.gen_range(0..64);
                let (r, snap) = h.range_query_traced(k, hi).map_err(|e| e.to_string())?;
                let (want, osnap) = o.range_query(k, hi);
                rqs.push(RangeRecord {
                    low: k,
                    high: hi,
                    snapshot: snap,
                    result: r.clone(),
                });
                (r != want || snap != osnap).then(|| format!("range({k}, {hi}) at {snap} (oracle {osnap})"))
            }
        };
        if let Some(m) = mismatch {
            return Err(format!("op {i}: {m}"));
        }
    }
    // Every snapshot rebuilt from the store's own stamps agrees with what was returned.
    let snap = snapshot_check(&effects, &rqs);
    if !snap.is_ok() {
        return Err(format!("timestamp history: {}", snap.violations[0]));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 30.0 {
        return Err(format!("took {secs:.1}s, limit 30s"));
    }
    Ok(format!("1e5 ops, {} range queries matched, {secs:.1}s", rqs.len()))
}

fn linearizability_campaign() -> Outcome {
    let start = Instant::now();
    let r = lincheck_campaign(&CampaignConfig::default());
    let secs = start.elapsed().as_secs_f64();
    if let Some(e) = r.errors.first() {
        return Err(e.clone());
    }
    if let Some((n, prefix)) = r.failures.first() {
        return Err(format!("history {n} not linearizable; violating prefix {prefix:?}"));
    }
    if r.linearizable != 1000 || secs >= 600.0 {
        return Err(format!("{}/1000 linearizable in {secs:.0}s", r.linearizable));
    }
    Ok(format!(
        "1000/1000 histories linearizable ({} with overlapping ops, {} slow-path entries), {secs:.1}s",
        r.overlapping, r.slow_path_entries
    ))
}

fn snapshot_consistency() -> Outcome {
    let r = run_stress(&StressConfig {
        threads: 8,
        ops_per_thread: 0,
        duration: Some(Duration::from_secs(30)),
        window_ops: u64::MAX,
        window_time: Duration::from_secs(1),
        keyspace: 10_000,
        prefill: 5_000,
        mix: Mix::new(45.0, 22.5, 22.5, 10.0),
        rq_size: 64,
        seed: 3,
        preempt: 64,
        force_slow: 32,
        ..Default::default()
    })?;
    if r.snapshots_checked == 0 {
        return Err("no range query was checked".into());
    }
    Ok(format!(
        "{} ops, {} range queries checked against the log over {} windows, 0 violations",
        r.ops, r.snapshots_checked, r.windows
    ))
}

fn structural_invariants() -> Outcome {
    let mut total = (0, 0, 0);
    for seed in 0..20 {
        let r = run_stress(&StressConfig {
            threads: 8,
            ops_per_thread: 100_000,
            window_ops: 25_000,
            keyspace: 2_000,
            prefill: 1_000,
            mix: Mix::new(10.0, 40.0, 40.0, 10.0),
            rq_size: 32,
            seed,
            tree: TreeConfig::with_sizes(8, 4, 8, 4),
            preempt: 256,
            force_slow: 64,
            ..Default::default()
        })
        .map_err(|e| format!("seed {seed}: {e}"))?;
        total.0 += r.counters.splits;
        total.1 += r.counters.merges + r.counters.borrows;
        total.2 += r.windows;
    }
    if total.0 == 0 || total.1 == 0 {
        return Err(format!("churn did not split and merge: {total:?}"));
    }
    Ok(format!(
        "20 seeds x 8 threads x 1e5 ops, {} validations clean; {} splits, {} merges/borrows",
        total.2, total.0, total.1
    ))
}

fn helping_liveness() -> Outcome {
    let mut worst = 0;
    for trial in 0..100 {
        let r = suspended_announcer(trial, 3, 3).map_err(|e| format!("trial {trial}: {e}"))?;
        if r.rounds > r.bound {
            return Err(format!(
                "trial {trial}: helped after {} rounds, bound {}",
                r.rounds, r.bound
            ));
        }
        worst = worst.max(r.rounds);
    }
    Ok(format!(
        "100/100 announcements completed by helpers, worst {worst} rounds (bound s*threads = 12)"
    ))
}

fn race_regressions() -> Outcome {
    for s in Schedule::ALL {
        for i in 0..1000 {
            s.run_once(i).map_err(|e| format!("iteration {i}: {e}"))?;
        }
    }
    let names: Vec<_> = Schedule::ALL.iter().map(|s| s.name()).collect();
    Ok(format!("{} x 1000 iterations, single install intact", names.join(", ")))
}

fn pruning_bound() -> Outcome {
    let r = run_stress(&StressConfig {
        threads: 4,
        ops_per_thread: 200_000,
        window_ops: 10_000,
        keyspace: 1_000,
        prefill: 500,
        mix: Mix::new(0.0, 45.0, 45.0, 10.0),
        rq_size: 64,
        seed: 7,
        tree: TreeConfig::with_sizes(8, 4, 8, 4),
        ..Default::default()
    })?;
    for (i, w) in r.waves.iter().enumerate() {
        if w.allocated_versions >= 10 * w.live_keys as i64 {
            return Err(format!(
                "wave {i}: {} version nodes for {} live keys",
                w.allocated_versions, w.live_keys
            ));
        }
    }
    Ok(format!(
        "{} waves, worst {:.2} version nodes per live key, all freed after drop",
        r.waves.len(),
        r.worst_version_ratio()
    ))
}

fn scaling_smoke() -> Outcome {
    let run = |threads| {
        run_stress(&StressConfig {
            threads,
            ops_per_thread: 0,
            duration: Some(Duration::from_secs(5)),
            window_ops: u64::MAX,
            window_time: Duration::from_secs(5),
            keyspace: 500_000,
            prefill: 100_000,
            mix: Mix::new(95.0, 2.5, 2.5, 0.0),
            seed: 8,
            check_snapshots: false,
            ..Default::default()
        })
    };
    let one = run(1)?;
    let eight = run(8)?;
    let tput = |r: &StressReport| r.ops as f64 / r.elapsed.as_secs_f64();
    let speedup = tput(&eight) / tput(&one);
    let mean = eight.ops as f64 / 8.0;
    let least = *eight.per_thread_ops.iter().min().unwrap() as f64;
    if least < 0.1 * mean {
        return Err(format!("thread starved: {least} ops vs mean {mean:.0}"));
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let soft = if speedup >= 3.0 {
        "met".to_string()
    } else {
        format!("not met, soft target, {cores} core(s) available")
    };
    Ok(format!(
        "no starvation (least thread {:.2} of mean); 8-thread speedup {speedup:.2}x vs 3x target: {soft}",
        least / mean
    ))
}

fn search_no_restart() -> Outcome {
    // Searches racing splits and merges, on top of every earlier stress run.
    run_stress(&StressConfig {
        threads: 8,
        ops_per_thread: 50_000,
        window_ops: 10_000,
        keyspace: 500,
        prefill: 250,
        mix: Mix::new(50.0, 20.0, 20.0, 10.0),
        seed: 9,
        tree: TreeConfig::with_sizes(4, 2, 4, 2),
        preempt: 64,
        force_slow: 32,
        ..Default::default()
    })?;
    let n = SEARCH_RESTARTS.load(Relaxed);
    let runs = STRESS_RUNS.load(Relaxed);
    if runs == 0 {
        return Err("no stress run recorded".into());
    }
    if n != 0 {
        return Err(format!("{n} search restarts over {runs} stress runs"));
    }
    Ok(format!("0 search restarts over {runs} stress runs"))
}

fn main() {
    // A quick sanity line so a broken build fails before the long criteria.
    assert_eq!(
        WfTree::new().register().unwrap().insert(1, 1).unwrap(),
        OpResult::inserted()
    );
    let _ = WaitFreeConfig::default();

    let criteria: [Criterion; 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("linearizability campaign", linearizability_campaign),
        ("snapshot consistency", snapshot_consistency),
        ("structural invariants", structural_invariants),
        ("helping liveness", helping_liveness),
        ("wait-free install race regressions", race_regressions),
        ("pruning bound", pruning_bound),
        ("scaling smoke", scaling_smoke),
        ("search no-restart", search_no_restart),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {e} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
