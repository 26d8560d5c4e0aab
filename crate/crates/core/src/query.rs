//! Similarity search over a built index: approximate search, the balanced
//! two-phase exact search, its unbalanced predecessor and k-NN.
//!
//! Distances are compared squared throughout; answers report the root.

use std::collections::{BinaryHeap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::build::available_cores;
use crate::distance::{lower_bound_scalar, squared_euclidean_bounded, QueryKernel};
use crate::error::{Error, Result};
use crate::index::{Index, LeafEntry};
use crate::raw::RawFile;
use crate::sax::{full_symbols_into, root_id_of, MAX_SEGMENTS};
use crate::series::{compute_paa, znormalize_in_place, Paa};

/// Default number of DistComp workers of the unbalanced exact search.
pub const DEFAULT_NB_WORKERS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub distance: f32,
    pub position: u64,
}

/// Per-query counters and timings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub series: u64,
    pub lb_computed: u64,
    /// Entries whose lower bound beat the best-so-far when first tested.
    pub candidates: u64,
    /// Raw series read after the approximate phase.
    pub raw_reads: u64,
    /// Raw series read by the approximate phase.
    pub approx_reads: u64,
    /// Best-so-far improvements after the approximate phase, summed over
    /// workers for the unbalanced search.
    pub bsf_updates: u64,
    /// Fraction of the collection never read from the raw file.
    pub pruning_ratio: f64,
    pub approx_secs: f64,
    pub lb_secs: f64,
    pub refine_secs: f64,
    pub total_secs: f64,
    /// Successive best-so-far distances of the shared bound, starting with
    /// the approximate answer.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub bsf_trace: Vec<f32>,
}

impl QueryMetrics {
    fn finish(&mut self, started: Instant) {
        self.total_secs = started.elapsed().as_secs_f64();
        let read = (self.raw_reads + self.approx_reads).min(self.series);
        self.pruning_ratio = if self.series == 0 {
            1.0
        } else {
            1.0 - read as f64 / self.series as f64
        };
    }
}

/// Worker counts for the parallel searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub lbc_workers: usize,
    pub rdc_workers: usize,
    pub nb_workers: usize,
}

impl SearchOptions {
    pub fn per_core(lbc_per_core: usize, rdc_per_core: usize) -> SearchOptions {
        let cores = available_cores();
        SearchOptions {
            lbc_workers: (lbc_per_core * cores).max(1),
            rdc_workers: (rdc_per_core * cores).max(1),
            nb_workers: DEFAULT_NB_WORKERS,
        }
    }
}

/// A query prepared for one index: normalized values, PAA, full word and
/// lower-bound kernel.
struct Prepared {
    values: Vec<f32>,
    paa: Paa,
    word: [u8; MAX_SEGMENTS],
    kernel: QueryKernel,
}

/// Answers queries against an index and its raw data file.
pub struct Searcher<'a> {
    index: &'a Index,
    raw: RawFile,
    options: SearchOptions,
}

impl<'a> Searcher<'a> {
    /// Opens the raw file recorded in the index.
    pub fn open(index: &'a Index) -> Result<Searcher<'a>> {
        let raw = index
            .raw_path()
            .ok_or_else(|| Error::Config("index does not record its raw data file".into()))?
            .to_path_buf();
        Self::with_raw(index, raw)
    }

    pub fn with_raw(index: &'a Index, raw: impl AsRef<Path>) -> Result<Searcher<'a>> {
        let raw = RawFile::open(raw, index.config().series_len)?;
        if raw.len() != index.series_count() {
            return Err(Error::InvalidInput(format!(
                "{} holds {} series but the index covers {}",
                raw.path().display(),
                raw.len(),
                index.series_count()
            )));
        }
        let c = index.config();
        Ok(Searcher {
            index,
            raw,
            options: SearchOptions::per_core(c.lbc_per_core, c.rdc_per_core),
        })
    }

    pub fn options(mut self, options: SearchOptions) -> Searcher<'a> {
        self.options = SearchOptions {
            lbc_workers: options.lbc_workers.max(1),
            rdc_workers: options.rdc_workers.max(1),
            nb_workers: options.nb_workers.max(1),
        };
        self
    }

    pub fn index(&self) -> &Index {
        self.index
    }

    fn prepare(&self, query: &[f32]) -> Result<Prepared> {
        let c = self.index.config();
        if query.len() != c.series_len {
            return Err(Error::InvalidInput(format!(
                "query has {} points, the index holds series of length {}",
                query.len(),
                c.series_len
            )));
        }
        if let Some(i) = query.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("query has a non-finite value at point {i}")));
        }
        let mut values = query.to_vec();
        if c.normalize {
            znormalize_in_place(&mut values);
        }
        let paa = compute_paa(&values, c.segments)?;
        let mut word = [0u8; MAX_SEGMENTS];
        full_symbols_into(&paa.means, &mut word[..c.segments]);
        let kernel = QueryKernel::new(&paa);
        Ok(Prepared {
            values,
            paa,
            word,
            kernel,
        })
    }

    /// Reads series `pos` as the index sees it (normalized if configured).
    fn load(&self, pos: u64, scratch: &mut Vec<u8>, out: &mut [f32]) -> Result<()> {
        self.raw.read_into(pos, scratch, out)?;
        if self.index.config().normalize {
            znormalize_in_place(out);
        }
        Ok(())
    }

    /// Entries of the leaf the query word routes to. A missing root child
    /// falls back to the existing subtree whose id is nearest in Hamming
    /// distance (ties to the lowest id); an empty leaf falls back to the
    /// non-empty leaf of that subtree with the smallest lower bound.
    fn approximate_leaf(&self, q: &Prepared) -> Result<Vec<LeafEntry>> {
        let w = self.index.config().segments;
        let n = self.index.config().series_len;
        let id = root_id_of(&q.word[..w]);
        let tree = match self.index.subtree(id) {
            Some(t) => t,
            None => self
                .index
                .subtrees()
                .min_by_key(|t| ((t.id() ^ id).count_ones(), t.id()))
                .ok_or(Error::NoAnswer)?,
        };
        let files = self.index.files();
        let routed = tree.route(&q.word[..w]);
        if tree.nodes()[routed].leaf().is_some_and(|l| l.count > 0) {
            return tree.leaf_entries(routed, &files);
        }
        let mut best: Option<(f32, usize)> = None;
        for (i, leaf) in tree.leaves() {
            if leaf.count == 0 {
                continue;
            }
            let lb = lower_bound_scalar(&q.paa, &tree.nodes()[i].word, n)?;
            if best.is_none_or(|(b, _)| lb < b) {
                best = Some((lb, i));
            }
        }
        let (_, at) = best.ok_or(Error::NoAnswer)?;
        tree.leaf_entries(at, &files)
    }

    fn approximate_into(&self, q: &Prepared, into: &impl Collector, metrics: &mut QueryMetrics) -> Result<()> {
        let t = Instant::now();
        let entries = self.approximate_leaf(q)?;
        let mut scratch = Vec::new();
        let mut s = vec![0.0; q.values.len()];
        for e in &entries {
            self.load(e.pos, &mut scratch, &mut s)?;
            metrics.approx_reads += 1;
            if let Some(d) = squared_euclidean_bounded(&q.values, &s, into.threshold()) {
                into.offer(d, e.pos);
            }
        }
        metrics.approx_secs = t.elapsed().as_secs_f64();
        Ok(())
    }

    /// Nearest neighbor within the leaf the query routes to.
    pub fn approximate(&self, query: &[f32]) -> Result<(QueryAnswer, QueryMetrics)> {
        let started = Instant::now();
        let q = self.prepare(query)?;
        let mut metrics = self.new_metrics();
        let bsf = SharedBsf::new();
        self.approximate_into(&q, &bsf, &mut metrics)?;
        let answer = bsf.answer()?;
        metrics.bsf_trace = bsf.trace();
        metrics.finish(started);
        Ok((answer, metrics))
    }

    fn new_metrics(&self) -> QueryMetrics {
        QueryMetrics {
            series: self.index.series_count(),
            ..QueryMetrics::default()
        }
    }

    /// Exact nearest neighbor: approximate seed, parallel lower bounds over
    /// the SAX array, then parallel real distances over the surviving
    /// candidates in file order under a shared best-so-far.
    pub fn exact(&self, query: &[f32]) -> Result<(QueryAnswer, QueryMetrics)> {
        let started = Instant::now();
        let q = self.prepare(query)?;
        let mut metrics = self.new_metrics();
        let bsf = SharedBsf::new();
        self.approximate_into(&q, &bsf, &mut metrics)?;
        let seeded = bsf.updates();
        self.two_phase(&q, &bsf, &mut metrics)?;
        metrics.bsf_updates = bsf.updates() - seeded;
        metrics.bsf_trace = bsf.trace();
        let answer = bsf.answer()?;
        metrics.finish(started);
        Ok((answer, metrics))
    }

    /// The `k` nearest neighbors, closest first.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<(Vec<QueryAnswer>, QueryMetrics)> {
        let n_series = self.index.series_count();
        if k == 0 || k as u64 > n_series {
            return Err(Error::InvalidInput(format!(
                "k must be in 1..={n_series}, got {k}"
            )));
        }
        let started = Instant::now();
        let q = self.prepare(query)?;
        let mut metrics = self.new_metrics();
        let heap = SharedKnn::new(k);
        self.approximate_into(&q, &heap, &mut metrics)?;
        let seeded = heap.updates.load(Ordering::Relaxed);
        self.two_phase(&q, &heap, &mut metrics)?;
        metrics.bsf_updates = heap.updates.load(Ordering::Relaxed) - seeded;
        metrics.finish(started);
        Ok((heap.into_sorted(), metrics))
    }

    fn two_phase(&self, q: &Prepared, bsf: &impl Collector, metrics: &mut QueryMetrics) -> Result<()> {
        let sax = self.index.sax();
        let total = sax.len();

        // Lower-bound phase: each worker scans a contiguous block of the SAX
        // array, so concatenating the sublists in block order yields the
        // candidate list sorted by position.
        let t = Instant::now();
        let workers = self.options.lbc_workers.min(total.max(1));
        let block = total.div_ceil(workers);
        let sublists: Vec<Vec<(f32, u64)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|j| {
                    s.spawn(move || {
                        let mut out = Vec::new();
                        for p in (j * block)..((j + 1) * block).min(total) {
                            let lb = q.kernel.lb_sq(sax.get(p));
                            if lb < bsf.threshold() {
                                out.push((lb, p as u64));
                            }
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let candidates: Vec<(f32, u64)> = sublists.into_iter().flatten().collect();
        debug_assert!(candidates.windows(2).all(|w| w[0].1 < w[1].1));
        metrics.lb_computed += total as u64;
        metrics.candidates += candidates.len() as u64;
        metrics.lb_secs = t.elapsed().as_secs_f64();

        // Real-distance phase.
        let t = Instant::now();
        let cursor = AtomicUsize::new(0);
        let reads = AtomicU64::new(0);
        let error = Mutex::new(None);
        std::thread::scope(|s| {
            for _ in 0..self.options.rdc_workers {
                s.spawn(|| {
                    let mut scratch = Vec::new();
                    let mut series = vec![0.0; q.values.len()];
                    loop {
                        let i = cursor.fetch_add(1, Ordering::Relaxed);
                        let Some(&(lb, pos)) = candidates.get(i) else { break };
                        let limit = bsf.threshold();
                        if lb >= limit {
                            continue;
                        }
                        if let Err(e) = self.load(pos, &mut scratch, &mut series) {
                            error.lock().unwrap().get_or_insert(e);
                            break;
                        }
                        reads.fetch_add(1, Ordering::Relaxed);
                        if let Some(d) = squared_euclidean_bounded(&q.values, &series, limit) {
                            bsf.offer(d, pos);
                        }
                    }
                });
            }
        });
        if let Some(e) = error.into_inner().unwrap() {
            return Err(e);
        }
        metrics.raw_reads += reads.into_inner();
        metrics.refine_secs = t.elapsed().as_secs_f64();
        Ok(())
    }

    /// Exact nearest neighbor with one private best-so-far per worker, each
    /// worker computing lower bounds and real distances over its own block
    /// of the SAX array.
    pub fn exact_nb(&self, query: &[f32]) -> Result<(QueryAnswer, QueryMetrics)> {
        let started = Instant::now();
        let q = self.prepare(query)?;
        let mut metrics = self.new_metrics();
        let seed = SharedBsf::new();
        self.approximate_into(&q, &seed, &mut metrics)?;
        let seed = seed.answer_sq()?;

        let t = Instant::now();
        let sax = self.index.sax();
        let total = sax.len();
        let workers = self.options.nb_workers.min(total.max(1));
        let block = total.div_ceil(workers);
        let results: Vec<Result<WorkerBest>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|j| {
                    let q = &q;
                    s.spawn(move || {
                        let mut best = WorkerBest {
                            dist_sq: seed.0,
                            position: seed.1,
                            ..WorkerBest::default()
                        };
                        let mut scratch = Vec::new();
                        let mut series = vec![0.0; q.values.len()];
                        for p in (j * block)..((j + 1) * block).min(total) {
                            let lb = q.kernel.lb_sq(sax.get(p));
                            if lb >= best.dist_sq {
                                continue;
                            }
                            best.candidates += 1;
                            self.load(p as u64, &mut scratch, &mut series)?;
                            best.reads += 1;
                            if let Some(d) = squared_euclidean_bounded(&q.values, &series, best.dist_sq) {
                                if d < best.dist_sq {
                                    best.dist_sq = d;
                                    best.position = p as u64;
                                    best.updates += 1;
                                }
                            }
                        }
                        Ok(best)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut answer = (seed.0, seed.1);
        for r in results {
            let b = r?;
            metrics.candidates += b.candidates;
            metrics.raw_reads += b.reads;
            metrics.bsf_updates += b.updates;
            if b.dist_sq < answer.0 || (b.dist_sq == answer.0 && b.position < answer.1) {
                answer = (b.dist_sq, b.position);
            }
        }
        metrics.lb_computed = total as u64;
        metrics.refine_secs = t.elapsed().as_secs_f64();
        metrics.finish(started);
        Ok((
            QueryAnswer {
                distance: answer.0.sqrt(),
                position: answer.1,
            },
            metrics,
        ))
    }
}

#[derive(Debug, Default)]
struct WorkerBest {
    dist_sq: f32,
    position: u64,
    candidates: u64,
    reads: u64,
    updates: u64,
}

/// Receives computed squared distances and exposes the current pruning
/// threshold.
trait Collector: Sync {
    fn threshold(&self) -> f32;
    fn offer(&self, dist_sq: f32, pos: u64);
}

/// Best-so-far answer shared by all workers of one query. The threshold is
/// readable without locking; distance and position change together under
/// the lock, and only ever decrease.
pub struct SharedBsf {
    threshold: AtomicU32,
    best: Mutex<BsfState>,
}

struct BsfState {
    dist_sq: f32,
    position: Option<u64>,
    updates: u64,
    trace: Vec<f32>,
}

impl Default for SharedBsf {
    fn default() -> Self {
        Self::new()
    }
}

impl SharedBsf {
    pub fn new() -> SharedBsf {
        SharedBsf {
            threshold: AtomicU32::new(f32::INFINITY.to_bits()),
            best: Mutex::new(BsfState {
                dist_sq: f32::INFINITY,
                position: None,
                updates: 0,
                trace: Vec::new(),
            }),
        }
    }

    /// Current best squared distance.
    pub fn get(&self) -> f32 {
        f32::from_bits(self.threshold.load(Ordering::Acquire))
    }

    /// Lowers the best to `dist_sq` at `pos` if it improves on it. Returns
    /// whether it did.
    pub fn update(&self, dist_sq: f32, pos: u64) -> bool {
        if dist_sq >= self.get() {
            return false;
        }
        let mut b = self.best.lock().unwrap();
        if dist_sq >= b.dist_sq {
            return false;
        }
        b.dist_sq = dist_sq;
        b.position = Some(pos);
        b.updates += 1;
        b.trace.push(dist_sq.sqrt());
        self.threshold.store(dist_sq.to_bits(), Ordering::Release);
        true
    }

    pub fn updates(&self) -> u64 {
        self.best.lock().unwrap().updates
    }

    fn trace(&self) -> Vec<f32> {
        self.best.lock().unwrap().trace.clone()
    }

    fn answer_sq(&self) -> Result<(f32, u64)> {
        let b = self.best.lock().unwrap();
        b.position.map(|p| (b.dist_sq, p)).ok_or(Error::NoAnswer)
    }

    pub fn answer(&self) -> Result<QueryAnswer> {
        let (d, position) = self.answer_sq()?;
        Ok(QueryAnswer {
            distance: d.sqrt(),
            position,
        })
    }
}

impl Collector for SharedBsf {
    fn threshold(&self) -> f32 {
        self.get()
    }

    fn offer(&self, dist_sq: f32, pos: u64) {
        self.update(dist_sq, pos);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem(f32, u64);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// The k best answers so far; the threshold is the k-th best distance once
/// k answers are known.
struct SharedKnn {
    k: usize,
    threshold: AtomicU32,
    heap: Mutex<(BinaryHeap<HeapItem>, HashSet<u64>)>,
    updates: AtomicU64,
}

impl SharedKnn {
    fn new(k: usize) -> SharedKnn {
        SharedKnn {
            k,
            threshold: AtomicU32::new(f32::INFINITY.to_bits()),
            heap: Mutex::new((BinaryHeap::with_capacity(k + 1), HashSet::new())),
            updates: AtomicU64::new(0),
        }
    }

    fn into_sorted(self) -> Vec<QueryAnswer> {
        let (heap, _) = self.heap.into_inner().unwrap();
        heap.into_sorted_vec()
            .into_iter()
            .map(|HeapItem(d, p)| QueryAnswer {
                distance: d.sqrt(),
                position: p,
            })
            .collect()
    }
}

impl Collector for SharedKnn {
    fn threshold(&self) -> f32 {
        f32::from_bits(self.threshold.load(Ordering::Acquire))
    }

    fn offer(&self, dist_sq: f32, pos: u64) {
        if dist_sq >= self.threshold() {
            return;
        }
        let mut guard = self.heap.lock().unwrap();
        let (heap, members) = &mut *guard;
        if members.contains(&pos) {
            return;
        }
        if heap.len() == self.k {
            if dist_sq >= heap.peek().unwrap().0 {
                return;
            }
            let HeapItem(_, out) = heap.pop().unwrap();
            members.remove(&out);
        }
        heap.push(HeapItem(dist_sq, pos));
        members.insert(pos);
        self.updates.fetch_add(1, Ordering::Relaxed);
        if heap.len() == self.k {
            self.threshold.store(heap.peek().unwrap().0.to_bits(), Ordering::Release);
        }
    }
}

pub fn approximate_search(index: &Index, query: &[f32]) -> Result<QueryAnswer> {
    Searcher::open(index)?.approximate(query).map(|r| r.0)
}

pub fn exact_search(index: &Index, query: &[f32]) -> Result<QueryAnswer> {
    Searcher::open(index)?.exact(query).map(|r| r.0)
}

pub fn exact_search_nb(index: &Index, query: &[f32]) -> Result<QueryAnswer> {
    Searcher::open(index)?.exact_nb(query).map(|r| r.0)
}

pub fn knn_search(index: &Index, query: &[f32], k: usize) -> Result<Vec<QueryAnswer>> {
    Searcher::open(index)?.knn(query, k).map(|r| r.0)
}
