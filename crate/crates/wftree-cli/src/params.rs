//! Workload flags, the key=value config file and per-mode defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, ValueEnum};
use serde::Serialize;

use wftree::verify::Mix;
use wftree::{TreeConfig, WaitFreeConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Flags shared by every subcommand. Unset flags fall back to the config file, then to the
/// mode's defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct Params {
    /// Search share in percent.
    #[arg(long)]
    pub reads: Option<f64>,
    #[arg(long)]
    pub inserts: Option<f64>,
    #[arg(long)]
    pub deletes: Option<f64>,
    /// Range query share in percent.
    #[arg(long)]
    pub rq: Option<f64>,
    /// Keys covered by one range query.
    #[arg(long)]
    pub rq_size: Option<u64>,
    #[arg(long)]
    pub prefill: Option<u64>,
    /// Keys are drawn from 1..=keyspace.
    #[arg(long)]
    pub keyspace: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run length in seconds; ignored when --ops is set.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Operations per thread, for runs that must not depend on timing.
    #[arg(long)]
    pub ops: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Failed lock-free attempts before an update asks for help.
    #[arg(long)]
    pub fast_retries: Option<usize>,
    /// Operations between two helping checks.
    #[arg(long)]
    pub help_period: Option<usize>,
    #[arg(long)]
    pub leaf_max: Option<usize>,
    #[arg(long)]
    pub leaf_min: Option<usize>,
    #[arg(long)]
    pub node_max: Option<usize>,
    #[arg(long)]
    pub node_min: Option<usize>,
    /// Also write the report to this file, appending.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Format of the --output file.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// key=value file with defaults for any of these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Parser)]
#[command(no_binary_name = true)]
struct FileArgs {
    #[command(flatten)]
    p: Params,
}

macro_rules! fill {
    ($dst:ident, $src:ident: $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl Params {
    /// Flags given on the command line win over the file.
    pub fn with_file(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let file =
            parse_config(&std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)
                .with_context(|| format!("in {}", path.display()))?;
        self.fill_from(file);
        Ok(self)
    }

    fn fill_from(&mut self, f: Params) {
        let p = self;
        fill!(p, f: reads, inserts, deletes, rq, rq_size, prefill, keyspace, threads, duration, ops, seed,
            fast_retries, help_period, leaf_max, leaf_min, node_max, node_min, output, format);
    }
}

/// Parses `key = value` lines; `#` starts a comment. Keys are flag names with `-` or `_`.
pub fn parse_config(text: &str) -> Result<Params> {
    let mut argv = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {line:?}", i + 1);
        };
        let k = k.trim().replace('_', "-");
        if k == "config" {
            bail!("line {}: config files do not nest", i + 1);
        }
        argv.push(format!("--{k}"));
        argv.push(v.trim().to_string());
    }
    Ok(FileArgs::try_parse_from(argv)
        .map_err(|e| anyhow::anyhow!("{}", e.render().to_string().trim()))?
        .p)
}

/// A fully resolved workload.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Workload {
    pub reads: f64,
    pub inserts: f64,
    pub deletes: f64,
    pub rq: f64,
    pub rq_size: u64,
    pub prefill: u64,
    pub keyspace: u64,
    pub threads: usize,
    pub duration_s: f64,
    pub ops_per_thread: Option<u64>,
    pub seed: u64,
    pub fast_retries: usize,
    pub help_period: usize,
    pub leaf_max: usize,
    pub leaf_min: usize,
    pub node_max: usize,
    pub node_min: usize,
}

impl Workload {
    /// Benchmark defaults: a read-heavy mix over a 1:5 prefill to keyspace ratio.
    pub fn bench() -> Self {
        let t = TreeConfig::default();
        let w = WaitFreeConfig::default();
        Self {
            reads: 94.0,
            inserts: 2.5,
            deletes: 2.5,
            rq: 1.0,
            rq_size: 1000,
            prefill: 100_000,
            keyspace: 500_000,
            threads: 1,
            duration_s: 5.0,
            ops_per_thread: None,
            seed: 1,
            fast_retries: w.fast_path_retries,
            help_period: w.helping_period,
            leaf_max: t.leaf_max,
            leaf_min: t.leaf_min,
            node_max: t.max_keys,
            node_min: t.min_keys,
        }
    }

    /// Churn over a small keyspace with small nodes, so splits and merges are frequent.
    pub fn stress() -> Self {
        Self {
            reads: 10.0,
            inserts: 40.0,
            deletes: 40.0,
            rq: 10.0,
            rq_size: 32,
            prefill: 1_000,
            keyspace: 2_000,
            threads: 4,
            ops_per_thread: Some(50_000),
            leaf_max: 8,
            leaf_min: 4,
            node_max: 8,
            node_min: 4,
            ..Self::bench()
        }
    }

    pub fn snapshot() -> Self {
        Self {
            reads: 45.0,
            inserts: 22.5,
            deletes: 22.5,
            rq: 10.0,
            rq_size: 64,
            prefill: 5_000,
            keyspace: 10_000,
            ..Self::stress()
        }
    }

    /// The mix is fixed by the history generator and only reported.
    pub fn lincheck() -> Self {
        Self {
            reads: 20.0,
            inserts: 40.0,
            deletes: 20.0,
            rq: 20.0,
            rq_size: 4,
            prefill: 0,
            keyspace: 8,
            threads: 3,
            ops_per_thread: Some(6),
            leaf_max: 4,
            leaf_min: 2,
            node_max: 4,
            node_min: 2,
            fast_retries: 2,
            help_period: 1,
            ..Self::bench()
        }
    }

    pub fn apply(mut self, p: &Params) -> Result<Self> {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = p.$f.clone() { self.$f = v; } )* };
        }
        set!(
            reads,
            inserts,
            deletes,
            rq,
            rq_size,
            prefill,
            keyspace,
            threads,
            seed,
            fast_retries,
            help_period,
            leaf_max,
            leaf_min,
            node_max,
            node_min
        );
        if let Some(d) = p.duration {
            if !(d.is_finite() && d > 0.0) {
                bail!("--duration must be a positive number of seconds");
            }
            self.duration_s = d;
            if p.ops.is_none() {
                self.ops_per_thread = None;
            }
        }
        if let Some(n) = p.ops {
            if n == 0 {
                bail!("--ops must be positive");
            }
            self.ops_per_thread = Some(n);
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.mix().validate()?;
        self.tree().validate()?;
        self.wf().validate()?;
        if self.keyspace == 0 || self.prefill > self.keyspace {
            bail!(
                "need keyspace > 0 and prefill <= keyspace, got {} and {}",
                self.keyspace,
                self.prefill
            );
        }
        if self.threads == 0 || self.threads > self.wf().max_threads {
            bail!("--threads must be in 1..={}", self.wf().max_threads);
        }
        if self.rq_size == 0 {
            bail!("--rq-size must be positive");
        }
        Ok(())
    }

    pub fn mix(&self) -> Mix {
        Mix::new(self.reads, self.inserts, self.deletes, self.rq)
    }

    pub fn tree(&self) -> TreeConfig {
        TreeConfig::with_sizes(self.node_max, self.node_min, self.leaf_max, self.leaf_min)
    }

    pub fn wf(&self) -> WaitFreeConfig {
        WaitFreeConfig {
            fast_path_retries: self.fast_retries,
            helping_period: self.help_period,
            max_threads: WaitFreeConfig::default().max_threads.max(self.threads),
        }
    }

    pub fn duration(&self) -> Duration {
        Duration::from_secs_f64(self.duration_s)
    }
}

pub fn format_of(p: &Params) -> Format {
    p.format.unwrap_or_default()
}

pub fn output_of(p: &Params) -> Option<&Path> {
    p.output.as_deref()
}
