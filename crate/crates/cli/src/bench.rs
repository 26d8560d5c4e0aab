//! Repeated timing runs with best-effort page cache clearing between them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use paris_core::build::available_cores;
use paris_core::Searcher;
use serde_json::json;

use crate::output::{Out, Spread, Table};
use crate::{answer, build_index, open_for_queries, BuildOpts, Engine, Paths, SearchOpts, Usage, VariantArg};

#[derive(Subcommand)]
pub enum BenchCommand {
    /// Build over a matrix of datasets, variants and worker counts.
    Build(BenchBuildArgs),
    /// Run every query with each engine.
    Query(BenchQueryArgs),
}

#[derive(Args)]
pub struct Common {
    /// Runs per cell.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Also write the summary as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Keep the page cache between runs.
    #[arg(long)]
    no_drop_caches: bool,
}

#[derive(Args)]
pub struct BenchBuildArgs {
    /// Raw data files; each is one dataset size of the matrix.
    #[arg(long, required = true)]
    raw: Vec<PathBuf>,
    /// Scratch index directory, rebuilt by every run.
    #[arg(long, default_value = "bench-index")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "paris+")]
    variants: Vec<VariantArg>,
    /// Worker counts (loaders and constructors); default 1 to the number
    /// of cores.
    #[arg(long, value_delimiter = ',')]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    len: usize,
    #[arg(long)]
    leaf_capacity: Option<usize>,
    #[arg(long, value_parser = crate::parse_bytes)]
    memory_budget: Option<u64>,
    #[arg(long)]
    buffer_mb: Option<f64>,
    #[arg(long)]
    throttle_mbps: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
pub struct BenchQueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "scan,nb,exact")]
    engines: Vec<Engine>,
    /// Use only the first N queries.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    search: SearchOpts,
    #[command(flatten)]
    common: Common,
}

/// Drops clean pages so every run starts cold. Needs root.
fn drop_caches() -> Result<(), String> {
    let synced = std::process::Command::new("sync").status();
    if !synced.as_ref().is_ok_and(|s| s.success()) {
        return Err(format!("sync failed: {synced:?}"));
    }
    std::fs::write("/proc/sys/vm/drop_caches", "3\n").map_err(|e| format!("/proc/sys/vm/drop_caches: {e}"))
}

struct Caches {
    enabled: bool,
    warned: bool,
}

impl Caches {
    /// Returns whether the caches were cleared.
    fn clear(&mut self) -> bool {
        if !self.enabled {
            return false;
        }
        match drop_caches() {
            Ok(()) => true,
            Err(e) => {
                if !self.warned {
                    eprintln!("warning: cannot clear the OS page cache ({e}); runs are measured warm");
                    self.warned = true;
                }
                false
            }
        }
    }
}

pub fn run(cmd: &BenchCommand, paths: &Paths, out: &mut Out, command: &[String]) -> anyhow::Result<()> {
    match cmd {
        BenchCommand::Build(a) => bench_build(a, paths, out, command),
        BenchCommand::Query(a) => bench_query(a, paths, out, command),
    }
}

fn check_common(c: &Common) -> anyhow::Result<Caches> {
    if c.repeats == 0 {
        bail!(Usage("--repeats must be at least 1".into()));
    }
    Ok(Caches {
        enabled: !c.no_drop_caches,
        warned: false,
    })
}

fn write_csv(path: &Path, csv: &str) -> anyhow::Result<()> {
    std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

fn bench_build(a: &BenchBuildArgs, paths: &Paths, out: &mut Out, command: &[String]) -> anyhow::Result<()> {
    let mut caches = check_common(&a.common)?;
    let workers = if a.workers.is_empty() {
        (1..=available_cores()).collect()
    } else {
        a.workers.clone()
    };
    let dir = paths.get(&a.out);
    let mut table = Table::new(&["dataset", "variant", "workers", "seconds", "stddev", "min", "max", "read s"]);
    let mut csv = String::from("dataset,variant,workers,seconds,stddev,min,max,read_seconds\n");
    for raw in &a.raw {
        let raw = paths.get(raw);
        for &variant in &a.variants {
            for &w in &workers {
                let opts = BuildOpts {
                    variant,
                    len: a.len,
                    segments: 16,
                    workers: Some(w),
                    constructors: Some(w),
                    buffer_mb: a.buffer_mb,
                    leaf_capacity: a.leaf_capacity,
                    memory_budget: a.memory_budget,
                    no_normalize: false,
                    throttle_mbps: a.throttle_mbps,
                };
                let mut secs = Vec::new();
                let mut read = Vec::new();
                for repeat in 0..a.common.repeats {
                    let cold = caches.clear();
                    let started = Instant::now();
                    let (_, stats, _) = build_index(&raw, &dir, &opts)?;
                    secs.push(stats.wall_secs);
                    read.push(stats.read_secs);
                    if out.json {
                        out.line(&json!({
                            "type": "run",
                            "dataset": raw,
                            "variant": opts.variant(),
                            "workers": w,
                            "repeat": repeat,
                            "cache_cleared": cold,
                            "stats": stats,
                            "with_persist_secs": started.elapsed().as_secs_f64(),
                        }));
                    }
                }
                let s = Spread::of(&secs);
                let r = Spread::of(&read);
                let name = raw.file_name().map_or_else(|| raw.display().to_string(), |n| n.to_string_lossy().into());
                let variant = opts.variant().name();
                writeln!(
                    csv,
                    "{name},{variant},{w},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    s.mean, s.stddev, s.min, s.max, r.mean
                )?;
                if out.json {
                    out.line(&json!({
                        "type": "summary",
                        "command": command,
                        "dataset": raw,
                        "variant": variant,
                        "workers": w,
                        "repeats": a.common.repeats,
                        "seconds": s,
                        "read_seconds": r,
                    }));
                }
                table.row(vec![
                    name,
                    variant.into(),
                    w.to_string(),
                    format!("{:.3}", s.mean),
                    format!("{:.3}", s.stddev),
                    format!("{:.3}", s.min),
                    format!("{:.3}", s.max),
                    format!("{:.3}", r.mean),
                ]);
            }
        }
    }
    if !out.json {
        table.print();
    }
    if let Some(p) = &a.common.csv {
        write_csv(&paths.get(p), &csv)?;
    }
    Ok(())
}

fn bench_query(a: &BenchQueryArgs, paths: &Paths, out: &mut Out, command: &[String]) -> anyhow::Result<()> {
    let mut caches = check_common(&a.common)?;
    let (index, raw, mut queries) = open_for_queries(&paths.get(&a.index), &paths.get(&a.queries), &a.search, paths)?;
    if let Some(limit) = a.limit {
        queries.truncate(limit);
    }
    let searcher = Searcher::with_raw(&index, &raw)?.options(a.search.options());
    let mut table = Table::new(&["engine", "seconds", "stddev", "per query", "raw reads", "bsf updates"]);
    let mut csv = String::from("engine,seconds,stddev,min,max,per_query_seconds,mean_raw_reads,mean_bsf_updates\n");
    for &engine in &a.engines {
        let mut secs = Vec::new();
        let (mut reads, mut updates) = (0u64, 0u64);
        for repeat in 0..a.common.repeats {
            let cold = caches.clear();
            let started = Instant::now();
            let (mut r, mut u) = (0u64, 0u64);
            for (i, q) in queries.iter().enumerate() {
                let got = answer(&searcher, &raw, engine, q, 1).with_context(|| format!("query {i}"))?;
                r += got.metrics.raw_reads;
                u += got.metrics.bsf_updates;
            }
            let wall = started.elapsed().as_secs_f64();
            secs.push(wall);
            (reads, updates) = (r, u);
            if out.json {
                out.line(&json!({
                    "type": "run",
                    "engine": engine.name(),
                    "repeat": repeat,
                    "cache_cleared": cold,
                    "seconds": wall,
                    "raw_reads": r,
                    "bsf_updates": u,
                }));
            }
        }
        let s = Spread::of(&secs);
        let nq = queries.len().max(1) as f64;
        let (mean_reads, mean_updates) = (reads as f64 / nq, updates as f64 / nq);
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{mean_reads:.3},{mean_updates:.3}",
            engine.name(),
            s.mean,
            s.stddev,
            s.min,
            s.max,
            s.mean / nq
        )?;
        if out.json {
            out.line(&json!({
                "type": "summary",
                "command": command,
                "engine": engine.name(),
                "queries": queries.len(),
                "repeats": a.common.repeats,
                "seconds": s,
                "mean_raw_reads": mean_reads,
                "mean_bsf_updates": mean_updates,
            }));
        }
        table.row(vec![
            engine.name().into(),
            format!("{:.3}", s.mean),
            format!("{:.3}", s.stddev),
            format!("{:.4}", s.mean / nq),
            format!("{mean_reads:.1}"),
            format!("{mean_updates:.2}"),
        ]);
    }
    if !out.json {
        table.print();
    }
    if let Some(p) = &a.common.csv {
        write_csv(&paths.get(p), &csv)?;
    }
    Ok(())
}
