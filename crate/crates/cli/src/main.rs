mod bench;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use paris_core::baseline::serial_scan_nn;
use paris_core::datagen::{generate_queries, generate_random_walk, GenSpec};
use paris_core::index::{load_index, persist_index, MIB};
use paris_core::raw::read_all;
use paris_core::verify::verify_dir;
use paris_core::{Builder, Index, IndexConfig, QueryAnswer, QueryMetrics, SearchOptions, Searcher, Variant};
use serde_json::json;

use output::{Out, Table};

/// Exit status classes.
const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// Bulk loading and exact similarity search over disk-resident data series.
#[derive(Parser)]
#[command(name = "paris", version)]
struct Cli {
    /// Emit line-delimited JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,

    /// Base directory for relative paths.
    #[arg(long, global = true, env = "PARIS_DATA_DIR", value_name = "DIR")]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random-walk dataset or query set.
    Generate(GenerateArgs),
    /// Build and persist an index over a raw data file.
    Build(BuildArgs),
    /// Answer queries against a persisted index.
    Query(QueryArgs),
    /// Time builds or query engines over repeated runs.
    #[command(subcommand)]
    Bench(bench::BenchCommand),
    /// Check the structural invariants of a persisted index.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    count: u64,
    #[arg(long, default_value_t = 256)]
    len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Z-normalize every series before writing it.
    #[arg(long)]
    normalize: bool,
    /// Draw from the query streams, which never overlap a dataset's.
    #[arg(long)]
    queries: bool,
}

#[derive(Args, Clone)]
pub(crate) struct BuildOpts {
    #[arg(long, value_enum, default_value_t = VariantArg::ParisPlus)]
    variant: VariantArg,
    /// Series length of the raw file.
    #[arg(long, default_value_t = 256)]
    len: usize,
    #[arg(long, default_value_t = 16)]
    segments: usize,
    /// Bulk-loading workers (default: variant specific).
    #[arg(long)]
    workers: Option<usize>,
    /// Construction workers.
    #[arg(long)]
    constructors: Option<usize>,
    /// Size of each half of the read buffer in MiB (default 1 for paris,
    /// 5 for paris+).
    #[arg(long)]
    buffer_mb: Option<f64>,
    #[arg(long)]
    leaf_capacity: Option<usize>,
    /// Bytes of buffered leaf entries that trigger a flush episode; accepts
    /// suffixes such as 64K or 1G.
    #[arg(long, value_parser = parse_bytes)]
    memory_budget: Option<u64>,
    /// Index raw values as stored, without z-normalization.
    #[arg(long)]
    no_normalize: bool,
    /// Simulate a device reading this many MB/s.
    #[arg(long)]
    throttle_mbps: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub(crate) enum VariantArg {
    #[value(name = "paris")]
    Paris,
    #[value(name = "paris+")]
    ParisPlus,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Paris => Variant::Paris,
            VariantArg::ParisPlus => Variant::ParisPlus,
        }
    }
}

impl BuildOpts {
    pub(crate) fn variant(&self) -> Variant {
        self.variant.into()
    }

    pub(crate) fn config(&self) -> anyhow::Result<IndexConfig> {
        let mut c = self.variant().default_config(self.len);
        c.segments = self.segments;
        if let Some(w) = self.workers {
            c.n_bulk_workers = w;
        }
        if let Some(w) = self.constructors {
            c.n_construction_workers = w;
        }
        if let Some(mb) = self.buffer_mb {
            if mb.is_nan() || mb <= 0.0 {
                bail!(Usage("--buffer-mb must be positive".into()));
            }
            c.buffer_part_bytes = ((mb * MIB as f64) as usize).max(1);
        }
        if let Some(cap) = self.leaf_capacity {
            c.leaf_capacity = cap;
        }
        if let Some(b) = self.memory_budget {
            c.memory_budget_bytes = b;
        }
        c.normalize = !self.no_normalize;
        c.read_throttle = self.throttle_mbps.map(|m| m * 1e6);
        c.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Args)]
struct BuildArgs {
    /// Raw data file: little-endian f32 series back to back.
    #[arg(long)]
    raw: PathBuf,
    /// Index directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: BuildOpts,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub(crate) enum Engine {
    Exact,
    Nb,
    Approx,
    Scan,
}

impl Engine {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Engine::Exact => "exact",
            Engine::Nb => "nb",
            Engine::Approx => "approx",
            Engine::Scan => "scan",
        }
    }
}

#[derive(Args, Clone)]
pub(crate) struct SearchOpts {
    #[arg(long, default_value_t = 1)]
    lbc_per_core: usize,
    #[arg(long, default_value_t = 5)]
    rdc_per_core: usize,
    /// Workers of the nb engine.
    #[arg(long)]
    nb_workers: Option<usize>,
    /// Raw data file, if not the one the index was built from.
    #[arg(long)]
    raw: Option<PathBuf>,
}

impl SearchOpts {
    fn options(&self) -> SearchOptions {
        let mut o = SearchOptions::per_core(self.lbc_per_core, self.rdc_per_core);
        if let Some(nb) = self.nb_workers {
            o.nb_workers = nb.max(1);
        }
        o
    }
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query file in the raw format, with the index's series length.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_enum, default_value_t = Engine::Exact)]
    engine: Engine,
    /// Neighbors per query (exact engine only when above 1).
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Answer only the first N queries.
    #[arg(long)]
    limit: Option<usize>,
    /// Include the best-so-far trace of every query in JSON output.
    #[arg(long)]
    trace: bool,
    #[command(flatten)]
    search: SearchOpts,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    index: PathBuf,
    /// Raw data file, if not the one recorded in the index.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Positions whose SAX words are recomputed from the raw file.
    #[arg(long, default_value_t = 1000)]
    sample: usize,
}

/// A usage error detected after argument parsing.
#[derive(Debug)]
pub(crate) struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct VerifyFailed;

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("index verification failed")
    }
}

impl std::error::Error for VerifyFailed {}

fn parse_bytes(s: &str) -> Result<u64, String> {
    parse_size::Config::new()
        .with_binary()
        .parse_size(s)
        .map_err(|e| format!("{s:?}: {e}"))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if cause.is::<VerifyFailed>() {
            return EXIT_VERIFY;
        }
        if let Some(e) = cause.downcast_ref::<paris_core::Error>() {
            return match e {
                paris_core::Error::Io { .. } | paris_core::Error::Format { .. } => EXIT_IO,
                paris_core::Error::Config(_) => EXIT_USAGE,
                _ => EXIT_OTHER,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_OTHER
}

/// The error chain on one line, skipping causes already quoted by the
/// message before them.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

/// Resolves relative paths against the data directory, if one is set.
pub(crate) struct Paths(Option<PathBuf>);

impl Paths {
    pub(crate) fn get(&self, p: &Path) -> PathBuf {
        match &self.0 {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let paths = Paths(cli.data_dir.clone());
    let mut out = Out::new(cli.json);
    let command: Vec<String> = std::env::args().collect();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a, &paths, &mut out),
        Command::Build(a) => cmd_build(a, &paths, &mut out, &command),
        Command::Query(a) => cmd_query(a, &paths, &mut out, &command),
        Command::Bench(b) => bench::run(b, &paths, &mut out, &command),
        Command::Verify(a) => cmd_verify(a, &paths, &mut out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_generate(a: &GenerateArgs, paths: &Paths, out: &mut Out) -> anyhow::Result<()> {
    if a.len == 0 {
        bail!(Usage("--len must be positive".into()));
    }
    let path = paths.get(&a.out);
    let spec = GenSpec {
        normalize: a.normalize,
        ..GenSpec::new(a.count, a.len, a.seed)
    };
    let started = Instant::now();
    let written = if a.queries {
        generate_queries(&spec, &path)?
    } else {
        generate_random_walk(&spec, &path)?
    };
    let secs = started.elapsed().as_secs_f64();
    if out.json {
        out.line(&json!({
            "type": "generate",
            "path": path,
            "spec": spec,
            "queries": a.queries,
            "series": written,
            "bytes": written * a.len as u64 * 4,
            "secs": secs,
        }));
    } else {
        println!(
            "wrote {written} series of length {} to {} ({:.2}s)",
            a.len,
            path.display(),
            secs
        );
    }
    Ok(())
}

/// Builds and persists an index, returning it with its stats.
pub(crate) fn build_index(
    raw: &Path,
    dir: &Path,
    opts: &BuildOpts,
) -> anyhow::Result<(Index, paris_core::BuildStats, f64)> {
    let config = opts.config()?;
    let (mut index, stats) = Builder::new(opts.variant(), config)
        .build(raw, dir)
        .with_context(|| format!("building {}", dir.display()))?;
    let started = Instant::now();
    persist_index(&mut index)?;
    Ok((index, stats, started.elapsed().as_secs_f64()))
}

fn cmd_build(a: &BuildArgs, paths: &Paths, out: &mut Out, command: &[String]) -> anyhow::Result<()> {
    let raw = paths.get(&a.raw);
    let dir = paths.get(&a.out);
    let (index, stats, persist_secs) = build_index(&raw, &dir, &a.opts)?;
    let unhidden = (stats.wall_secs - stats.read_secs).max(0.0);
    if out.json {
        out.line(&json!({
            "type": "report",
            "command": command,
            "variant": a.opts.variant(),
            "config": index.config(),
            "stats": stats,
            "phases": {
                "read_secs": stats.read_secs,
                "construction_secs": stats.construction_secs,
                "cpu_not_hidden_secs": unhidden,
                "persist_secs": persist_secs,
                "wall_secs": stats.wall_secs,
            },
        }));
        return Ok(());
    }
    let c = index.config();
    println!(
        "built {} index over {} series in {}",
        a.opts.variant(),
        stats.series,
        dir.display()
    );
    println!(
        "  config: n={} w={} leaf capacity {} buffer {:.2} MiB x2, {} loaders, {} constructors",
        c.series_len,
        c.segments,
        c.leaf_capacity,
        c.buffer_part_bytes as f64 / MIB as f64,
        c.n_bulk_workers,
        c.n_construction_workers
    );
    let mut t = Table::new(&["phase", "seconds", "share"]);
    let share = |s: f64| format!("{:.1}%", 100.0 * s / stats.wall_secs.max(1e-12));
    t.row(vec!["reading (coordinator)".into(), format!("{:.3}", stats.read_secs), share(stats.read_secs)]);
    t.row(vec![
        "flush episodes".into(),
        format!("{:.3}", stats.construction_secs),
        share(stats.construction_secs),
    ]);
    t.row(vec!["not hidden by reads".into(), format!("{unhidden:.3}"), share(unhidden)]);
    t.row(vec!["total build".into(), format!("{:.3}", stats.wall_secs), share(stats.wall_secs)]);
    t.row(vec!["persist".into(), format!("{persist_secs:.3}"), String::new()]);
    t.print();
    println!(
        "  {} rounds, {} episodes, {} leaves, {} nodes, {} buffer overlap violations",
        stats.rounds, stats.episodes, stats.leaves, stats.nodes, stats.overlap_violations
    );
    Ok(())
}

/// Answers of one engine for one query.
pub(crate) struct Answered {
    pub answers: Vec<QueryAnswer>,
    pub metrics: QueryMetrics,
}

pub(crate) fn answer(
    searcher: &Searcher,
    raw: &Path,
    engine: Engine,
    query: &[f32],
    k: usize,
) -> anyhow::Result<Answered> {
    let index = searcher.index();
    Ok(match engine {
        Engine::Exact if k > 1 => {
            let (answers, metrics) = searcher.knn(query, k)?;
            Answered { answers, metrics }
        }
        Engine::Exact => one(searcher.exact(query)?),
        Engine::Nb => one(searcher.exact_nb(query)?),
        Engine::Approx => one(searcher.approximate(query)?),
        Engine::Scan => {
            let config = index.config();
            let (a, s) = serial_scan_nn(raw, config.series_len, query, config.normalize)?;
            let metrics = QueryMetrics {
                series: s.series_scanned,
                raw_reads: s.series_scanned,
                total_secs: s.wall_secs,
                ..QueryMetrics::default()
            };
            Answered {
                answers: vec![a],
                metrics,
            }
        }
    })
}

fn one((a, metrics): (QueryAnswer, QueryMetrics)) -> Answered {
    Answered {
        answers: vec![a],
        metrics,
    }
}

/// Loads an index and a searcher's raw file, checking the query file
/// against the index's series length.
pub(crate) fn open_for_queries(
    index_dir: &Path,
    queries: &Path,
    search: &SearchOpts,
    paths: &Paths,
) -> anyhow::Result<(Index, PathBuf, Vec<Vec<f32>>)> {
    let index = load_index(index_dir)?;
    let n = index.config().series_len;
    let raw = match (&search.raw, index.raw_path()) {
        (Some(r), _) => paths.get(r),
        (None, Some(r)) => r.to_path_buf(),
        (None, None) => bail!(Usage("the index records no raw file; pass --raw".into())),
    };
    let values = read_all(queries, n).with_context(|| format!("query file does not match series length {n}"))?;
    let queries = values.chunks_exact(n.max(1)).map(<[f32]>::to_vec).collect();
    Ok((index, raw, queries))
}

fn cmd_query(a: &QueryArgs, paths: &Paths, out: &mut Out, command: &[String]) -> anyhow::Result<()> {
    if a.k == 0 {
        bail!(Usage("--k must be at least 1".into()));
    }
    if a.k > 1 && a.engine != Engine::Exact {
        bail!(Usage(format!("--k {} needs --engine exact", a.k)));
    }
    let (index, raw, mut queries) = open_for_queries(&paths.get(&a.index), &paths.get(&a.queries), &a.search, paths)?;
    if let Some(limit) = a.limit {
        queries.truncate(limit);
    }
    let searcher = Searcher::with_raw(&index, &raw)?.options(a.search.options());
    let started = Instant::now();
    let mut per_query = Vec::with_capacity(queries.len());
    let mut table = Table::new(&["query", "rank", "position", "distance"]);
    for (i, q) in queries.iter().enumerate() {
        let mut r = answer(&searcher, &raw, a.engine, q, a.k).with_context(|| format!("query {i}"))?;
        for (rank, ans) in r.answers.iter().enumerate() {
            if out.json {
                out.line(&json!({
                    "type": "answer",
                    "query": i,
                    "rank": rank,
                    "position": ans.position,
                    "distance": ans.distance,
                }));
            } else {
                table.row(vec![
                    i.to_string(),
                    rank.to_string(),
                    ans.position.to_string(),
                    format!("{:.6}", ans.distance),
                ]);
            }
        }
        if !a.trace {
            r.metrics.bsf_trace.clear();
        }
        per_query.push(r.metrics);
    }
    let wall = started.elapsed().as_secs_f64();
    let agg = output::aggregate(&per_query);
    if out.json {
        out.line(&json!({
            "type": "report",
            "command": command,
            "engine": a.engine.name(),
            "k": a.k,
            "config": index.config(),
            "search": a.search.options(),
            "queries": per_query,
            "aggregate": agg,
            "wall_secs": wall,
        }));
        return Ok(());
    }
    table.print();
    println!(
        "{} queries with {} in {wall:.3}s ({:.4}s per query)",
        per_query.len(),
        a.engine.name(),
        agg.mean_secs
    );
    println!(
        "  mean raw reads {:.1}, mean BSF updates {:.2}, mean pruning {:.4}%",
        agg.mean_raw_reads,
        agg.mean_bsf_updates,
        100.0 * agg.mean_pruning
    );
    Ok(())
}

fn cmd_verify(a: &VerifyArgs, paths: &Paths, out: &mut Out) -> anyhow::Result<()> {
    let dir = paths.get(&a.index);
    let raw = a.raw.as_ref().map(|r| paths.get(r));
    let report = verify_dir(&dir, raw.as_deref(), a.sample)?;
    if out.json {
        for c in &report.checks {
            out.line(&json!({ "type": "check", "name": c.name, "passed": c.passed, "detail": c.detail }));
        }
        out.line(&json!({ "type": "report", "index": dir, "passed": report.passed() }));
    } else {
        print!("{report}");
    }
    if !report.passed() {
        bail!(VerifyFailed);
    }
    Ok(())
}
