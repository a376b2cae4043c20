//! `wftree bench` measures throughput; `wftree verify ...` runs the checkers and exits nonzero on
//! any violation.

mod bench;
mod output;
mod params;
mod verify;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value as Json};

use params::{Params, Workload};

#[derive(Parser)]
#[command(
    name = "wftree",
    version,
    about = "Benchmark and verification harness for the wftree store"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Prefill, then run the operation mix on worker threads and report throughput.
    Bench(#[command(flatten)] Params),
    #[command(subcommand)]
    Verify(VerifyCmd),
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Record small concurrent histories and check each for linearizability.
    Lincheck(LincheckArgs),
    /// Churn in windows; validate the structure and replay the effect log at every boundary.
    Stress(StressArgs),
    /// As stress, with the default mix weighted towards range queries, and fail if none was checked.
    Snapshot(StressArgs),
}

#[derive(Args)]
struct Perturb {
    /// Yield at one in this many pause points (needs the test-hooks feature; 0 = off).
    #[arg(long, default_value_t = 0)]
    preempt: u32,
    /// Fail one in this many fast-path attempts (needs the test-hooks feature; 0 = off).
    #[arg(long, default_value_t = 0)]
    force_slow: u32,
}

#[derive(Args)]
struct LincheckArgs {
    #[command(flatten)]
    p: Params,
    #[arg(long, default_value_t = 1000)]
    histories: usize,
    /// Forge one response per history before checking; the run must then fail.
    #[arg(long)]
    inject_fault: bool,
    #[command(flatten)]
    perturb: Perturb,
}

#[derive(Args)]
struct StressArgs {
    #[command(flatten)]
    p: Params,
    /// Operations per thread between two quiescent checks.
    #[arg(long, default_value_t = 10_000)]
    window: u64,
    #[command(flatten)]
    perturb: Perturb,
}

fn record(mode: &str, w: &Workload, metrics: Json, violations: &[String]) -> Json {
    json!({
        "mode": mode,
        "ok": violations.is_empty(),
        "config": w,
        "metrics": metrics,
        "violations": violations,
    })
}

fn run(cli: Cli) -> Result<bool> {
    let (mode, p, w, metrics, violations) = match cli.cmd {
        Cmd::Bench(p) => {
            let p = p.with_file()?;
            let w = Workload::bench().apply(&p)?;
            let (m, v) = bench::run_bench(&w)?;
            ("bench", p, w, serde_json::to_value(m)?, v)
        }
        Cmd::Verify(VerifyCmd::Lincheck(a)) => {
            let p = a.p.with_file()?;
            verify::reject_mix_flags(&p)?;
            let w = Workload::lincheck().apply(&p)?;
            let r = verify::lincheck(&w, a.histories, a.inject_fault, a.perturb.preempt, a.perturb.force_slow)?;
            ("verify-lincheck", p, w, r.metrics, r.violations)
        }
        Cmd::Verify(VerifyCmd::Stress(a)) => {
            let p = a.p.with_file()?;
            let w = Workload::stress().apply(&p)?;
            let r = verify::stress_run(&w, a.window, a.perturb.preempt, a.perturb.force_slow, false)?;
            ("verify-stress", p, w, r.metrics, r.violations)
        }
        Cmd::Verify(VerifyCmd::Snapshot(a)) => {
            let p = a.p.with_file()?;
            let w = Workload::snapshot().apply(&p)?;
            let r = verify::stress_run(&w, a.window, a.perturb.preempt, a.perturb.force_slow, true)?;
            ("verify-snapshot", p, w, r.metrics, r.violations)
        }
    };
    let rec = record(mode, &w, metrics, &violations);
    output::emit(&rec, params::output_of(&p), params::format_of(&p))?;
    for v in &violations {
        eprintln!("violation: {v}");
    }
    Ok(violations.is_empty())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
