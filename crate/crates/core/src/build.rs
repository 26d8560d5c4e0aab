//! ParIS and ParIS+ index construction.
//!
//! Both variants share the same stages. A coordinator reads the raw file
//! through a double buffer; bulk-loading workers summarize their chunk of
//! the current part, record the word in the SAX array and append
//! `<word, position>` to the receiving buffer of the word's root subtree.
//! When the estimated memory use exceeds the budget (and at end of file),
//! the buffered work is turned into tree nodes and leaves are written out.
//!
//! * ParIS: loaders are spawned per part; construction workers claim
//!   receiving buffers, grow their subtrees and flush the leaves.
//! * ParIS+: long-lived loaders also grow the tree after every part, so
//!   construction workers only flush leaves.
//!
//! Each receiving-buffer batch is sorted by position before insertion, so a
//! subtree always sees its entries in file order and the resulting tree does
//! not depend on worker counts or batch boundaries.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Barrier, Condvar, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::index::{Index, IndexConfig, LeafEntry, LeafFiles, SaxArray, Subtree, META_FILE, MIB, SAX_FILE};
use crate::raw::SeriesReader;
use crate::sax::{full_symbols_into, root_id_of, SaxWord, MAX_SEGMENTS};
use crate::series::{decode_le, paa_into, znormalize_in_place};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(rename = "paris")]
    Paris,
    #[serde(rename = "paris+")]
    ParisPlus,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Paris => "paris",
            Variant::ParisPlus => "paris+",
        }
    }

    /// Default configuration for this variant: 1 MB buffer parts for ParIS,
    /// 5 MB for ParIS+, which also uses one loader per core minus one.
    pub fn default_config(self, series_len: usize) -> IndexConfig {
        let base = IndexConfig::with_series_len(series_len);
        match self {
            Variant::Paris => IndexConfig {
                buffer_part_bytes: MIB,
                ..base
            },
            Variant::ParisPlus => IndexConfig {
                buffer_part_bytes: 5 * MIB,
                n_bulk_workers: available_cores().saturating_sub(1).max(1),
                ..base
            },
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "paris" => Ok(Variant::Paris),
            "paris+" | "parisplus" => Ok(Variant::ParisPlus),
            _ => Err(Error::Config(format!("unknown build variant {s:?} (expected paris or paris+)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Reading,
    Constructing,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildProgress {
    pub series_read: u64,
    /// Estimated bytes held by data read since the last construction episode.
    pub memory_used: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub series: u64,
    pub wall_secs: f64,
    /// Time the coordinator spent inside raw-file reads.
    pub read_secs: f64,
    /// Time spent in construction episodes, when nothing else runs.
    pub construction_secs: f64,
    /// Construction episodes, including the final one at end of file.
    pub episodes: u32,
    /// Buffer parts processed.
    pub rounds: u64,
    /// Double-buffer accesses that overlapped a write to the same part.
    pub overlap_violations: u64,
    pub leaves: usize,
    pub nodes: usize,
}

type ProgressFn<'a> = dyn Fn(BuildProgress) + Sync + 'a;

/// Configures and runs an index build.
pub struct Builder<'a> {
    config: IndexConfig,
    variant: Variant,
    progress: Option<&'a ProgressFn<'a>>,
}

impl<'a> Builder<'a> {
    pub fn new(variant: Variant, config: IndexConfig) -> Builder<'a> {
        Builder {
            config,
            variant,
            progress: None,
        }
    }

    pub fn progress(mut self, f: &'a ProgressFn<'a>) -> Builder<'a> {
        self.progress = Some(f);
        self
    }

    /// Builds an index over `raw` with its leaf files in `dir`. The index is
    /// not persisted; see [`crate::index::persist_index`].
    pub fn build(&self, raw: impl AsRef<Path>, dir: impl AsRef<Path>) -> Result<(Index, BuildStats)> {
        self.config.validate()?;
        let raw = raw.as_ref();
        let dir = dir.as_ref();
        prepare_dir(dir)?;
        let start = Instant::now();
        let reader = SeriesReader::open(raw, self.config.series_len)?.throttled(self.config.read_throttle);
        let shared = Shared::new(&self.config, dir, reader.total());
        let mut run = Run {
            shared: &shared,
            progress: self.progress,
            stats: BuildStats::default(),
            series_read: 0,
            since_episode: 0,
        };
        match self.variant {
            Variant::Paris => run.paris(reader)?,
            Variant::ParisPlus => run.paris_plus(reader)?,
        }
        let mut stats = run.stats;
        let raw_path = std::fs::canonicalize(raw).unwrap_or_else(|_| raw.to_path_buf());
        let index = shared.into_index(dir.to_path_buf(), raw_path)?;
        stats.series = index.series_count();
        stats.leaves = index.leaf_count();
        stats.nodes = index.node_count();
        stats.wall_secs = start.elapsed().as_secs_f64();
        if let Some(f) = self.progress {
            f(BuildProgress {
                series_read: stats.series,
                memory_used: 0,
                phase: Phase::Done,
            });
        }
        Ok((index, stats))
    }
}

pub fn build_paris(raw: impl AsRef<Path>, dir: impl AsRef<Path>, config: &IndexConfig) -> Result<(Index, BuildStats)> {
    Builder::new(Variant::Paris, config.clone()).build(raw, dir)
}

pub fn build_parisplus(
    raw: impl AsRef<Path>,
    dir: impl AsRef<Path>,
    config: &IndexConfig,
) -> Result<(Index, BuildStats)> {
    Builder::new(Variant::ParisPlus, config.clone()).build(raw, dir)
}

/// Creates `dir` and removes index files left by an earlier build.
fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_path(dir)?;
    for entry in std::fs::read_dir(dir).with_path(dir)? {
        let path = entry.with_path(dir)?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let stale = name == META_FILE
            || name == SAX_FILE
            || (name.starts_with("subtree-") && (name.ends_with(".leaves") || name.ends_with(".leaves.tmp")));
        if stale {
            std::fs::remove_file(&path).with_path(&path)?;
        }
    }
    Ok(())
}

/// Reader/writer counters for one half of the double buffer.
#[derive(Default)]
struct PartUse {
    readers: AtomicUsize,
    writing: AtomicBool,
}

impl PartUse {
    fn begin_read(&self, violations: &AtomicU64) {
        self.readers.fetch_add(1, Ordering::SeqCst);
        if self.writing.load(Ordering::SeqCst) {
            violations.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn end_read(&self) {
        self.readers.fetch_sub(1, Ordering::SeqCst);
    }

    fn begin_write(&self, violations: &AtomicU64) {
        self.writing.store(true, Ordering::SeqCst);
        if self.readers.load(Ordering::SeqCst) != 0 {
            violations.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn end_write(&self) {
        self.writing.store(false, Ordering::SeqCst);
    }
}

/// State shared by the coordinator and all workers of one build.
struct Shared<'c> {
    config: &'c IndexConfig,
    files: LeafFiles,
    rec_bufs: Vec<Mutex<Vec<LeafEntry>>>,
    subtrees: Vec<Mutex<Option<Subtree>>>,
    /// Receiving buffers filled since the last growth, each listed once.
    dirty: Mutex<Vec<u32>>,
    listed: Vec<AtomicBool>,
    /// Written at disjoint positions by the loaders.
    sax: Vec<AtomicU8>,
    claim: AtomicUsize,
    error: Mutex<Option<Error>>,
    failed: AtomicBool,
    violations: AtomicU64,
    part_use: [PartUse; 2],
}

impl<'c> Shared<'c> {
    fn new(config: &'c IndexConfig, dir: &Path, series: u64) -> Shared<'c> {
        let roots = 1usize << config.segments;
        Shared {
            config,
            files: LeafFiles::new(dir, config.segments),
            rec_bufs: (0..roots).map(|_| Mutex::new(Vec::new())).collect(),
            subtrees: (0..roots).map(|_| Mutex::new(None)).collect(),
            dirty: Mutex::new(Vec::new()),
            listed: (0..roots).map(|_| AtomicBool::new(false)).collect(),
            sax: (0..series as usize * config.segments).map(|_| AtomicU8::new(0)).collect(),
            claim: AtomicUsize::new(0),
            error: Mutex::new(None),
            failed: AtomicBool::new(false),
            violations: AtomicU64::new(0),
            part_use: [PartUse::default(), PartUse::default()],
        }
    }

    fn fail(&self, e: Error) {
        self.failed.store(true, Ordering::SeqCst);
        self.error.lock().unwrap().get_or_insert(e);
    }

    fn check(&self) -> Result<()> {
        match self.error.lock().unwrap().take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Summarizes the series in `bytes`, the first of which sits at raw-file
    /// position `base`.
    fn summarize(&self, bytes: &[u8], base: u64, scratch: &mut Scratch) -> Result<()> {
        let n = self.config.series_len;
        let w = self.config.segments;
        for (i, raw) in bytes.chunks_exact(n * 4).enumerate() {
            let pos = base + i as u64;
            decode_le(raw, &mut scratch.series);
            if let Some(j) = scratch.series.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "series {pos} has a non-finite value at point {j}"
                )));
            }
            if self.config.normalize {
                znormalize_in_place(&mut scratch.series);
            }
            paa_into(&scratch.series, &mut scratch.paa);
            let word = &mut scratch.word[..w];
            full_symbols_into(&scratch.paa, word);
            let at = pos as usize * w;
            for (slot, &s) in self.sax[at..at + w].iter().zip(word.iter()) {
                slot.store(s, Ordering::Relaxed);
            }
            let id = root_id_of(word);
            self.rec_bufs[id as usize].lock().unwrap().push(LeafEntry::new(word, pos));
            if !self.listed[id as usize].swap(true, Ordering::Relaxed) {
                scratch.touched.push(id);
            }
        }
        self.dirty.lock().unwrap().append(&mut scratch.touched);
        Ok(())
    }

    /// Claims receiving buffers until none are left, inserting each batch
    /// into its subtree; with `flush`, visits every subtree and also writes
    /// its leaves, otherwise visits only the listed buffers.
    fn grow_claimed(&self, flush: bool) -> Result<()> {
        let capacity = self.config.leaf_capacity;
        loop {
            let i = self.claim.fetch_add(1, Ordering::Relaxed);
            if self.failed.load(Ordering::Relaxed) {
                return Ok(());
            }
            let id = if flush {
                i
            } else {
                match self.dirty.lock().unwrap().get(i) {
                    Some(&id) => id as usize,
                    None => return Ok(()),
                }
            };
            if id >= self.rec_bufs.len() {
                return Ok(());
            }
            self.listed[id].store(false, Ordering::Relaxed);
            let mut batch = std::mem::take(&mut *self.rec_bufs[id].lock().unwrap());
            if batch.is_empty() && !flush {
                continue;
            }
            let mut slot = self.subtrees[id].lock().unwrap();
            if !batch.is_empty() {
                batch.sort_unstable_by_key(|e| e.pos);
                let tree = slot.get_or_insert_with(|| {
                    Subtree::new(id as u32, SaxWord::root_of(batch[0].word(self.config.segments)))
                });
                for e in batch {
                    tree.insert(e, capacity, &self.files)?;
                }
            }
            if flush {
                if let Some(tree) = slot.as_mut() {
                    tree.flush_all(&self.files)?;
                }
            }
        }
    }

    /// Claims subtrees and flushes their leaf output buffers.
    fn flush_claimed(&self) -> Result<()> {
        loop {
            let id = self.claim.fetch_add(1, Ordering::Relaxed);
            if id >= self.subtrees.len() || self.failed.load(Ordering::Relaxed) {
                return Ok(());
            }
            if let Some(tree) = self.subtrees[id].lock().unwrap().as_mut() {
                tree.flush_all(&self.files)?;
            }
        }
    }

    /// Runs `work` on `workers` threads sharing the claim counter.
    fn pool(&self, workers: usize, work: impl Fn(&Self) -> Result<()> + Sync) -> Result<()> {
        self.claim.store(0, Ordering::SeqCst);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| {
                    if let Err(e) = work(self) {
                        self.fail(e);
                    }
                });
            }
        });
        self.check()
    }

    fn into_index(self, dir: PathBuf, raw_path: PathBuf) -> Result<Index> {
        let sax: Vec<u8> = self.sax.into_iter().map(AtomicU8::into_inner).collect();
        let sax = SaxArray::new(self.config.segments, sax)?;
        let subtrees = self
            .subtrees
            .into_iter()
            .filter_map(|m| m.into_inner().unwrap())
            .map(|t| (t.id(), t))
            .collect();
        Ok(Index::from_parts(self.config.clone(), dir, sax, subtrees, Some(raw_path)))
    }
}

struct Scratch {
    series: Vec<f32>,
    paa: Vec<f32>,
    word: [u8; MAX_SEGMENTS],
    touched: Vec<u32>,
}

impl Scratch {
    fn new(config: &IndexConfig) -> Scratch {
        Scratch {
            series: vec![0.0; config.series_len],
            paa: vec![0.0; config.segments],
            word: [0; MAX_SEGMENTS],
            touched: Vec::new(),
        }
    }
}

/// Coordinator-side state of one build.
struct Run<'s, 'c> {
    shared: &'s Shared<'c>,
    progress: Option<&'s ProgressFn<'s>>,
    stats: BuildStats,
    series_read: u64,
    since_episode: u64,
}

impl Run<'_, '_> {
    fn report(&self, phase: Phase) {
        if let Some(f) = self.progress {
            f(BuildProgress {
                series_read: self.series_read,
                memory_used: self.memory_used(),
                phase,
            });
        }
    }

    fn memory_used(&self) -> u64 {
        self.since_episode * self.shared.config.bytes_per_series()
    }

    fn read_part(&mut self, reader: &mut SeriesReader, part: usize, buf: &mut Vec<u8>) -> Result<usize> {
        let shared = self.shared;
        let t = Instant::now();
        shared.part_use[part].begin_write(&shared.violations);
        let got = reader.read_block(buf, shared.config.part_series());
        shared.part_use[part].end_write();
        self.stats.read_secs += t.elapsed().as_secs_f64();
        got
    }

    /// Bookkeeping after a part has been fully processed. Returns whether
    /// memory is exhausted.
    fn part_done(&mut self, len: usize) -> bool {
        self.series_read += len as u64;
        self.since_episode += len as u64;
        self.stats.rounds += 1;
        self.report(Phase::Reading);
        self.memory_used() > self.shared.config.memory_budget_bytes
    }

    fn episode(&mut self, work: impl Fn(&Shared) -> Result<()> + Sync) -> Result<()> {
        self.report(Phase::Constructing);
        let t = Instant::now();
        self.shared.pool(self.shared.config.n_construction_workers, work)?;
        self.shared.dirty.lock().unwrap().clear();
        self.stats.construction_secs += t.elapsed().as_secs_f64();
        self.stats.episodes += 1;
        self.since_episode = 0;
        Ok(())
    }

    fn paris(&mut self, mut reader: SeriesReader) -> Result<()> {
        let shared = self.shared;
        let config = shared.config;
        let chunk = config.chunk_size();
        let series_bytes = config.series_bytes();
        let mut parts = [Vec::new(), Vec::new()];
        let mut cur = 0;
        let mut len = self.read_part(&mut reader, cur, &mut parts[cur])?;
        let mut base = 0u64;
        while len > 0 {
            let (a, b) = parts.split_at_mut(1);
            let (loading, filling) = if cur == 0 { (&a[0], &mut b[0]) } else { (&b[0], &mut a[0]) };
            let next_len = std::thread::scope(|s| {
                for j in 0..config.n_bulk_workers {
                    let first = j * chunk;
                    if first >= len {
                        break;
                    }
                    let last = (first + chunk).min(len);
                    let bytes = &loading[first * series_bytes..last * series_bytes];
                    s.spawn(move || {
                        shared.part_use[cur].begin_read(&shared.violations);
                        let mut scratch = Scratch::new(config);
                        if let Err(e) = shared.summarize(bytes, base + first as u64, &mut scratch) {
                            shared.fail(e);
                        }
                        shared.part_use[cur].end_read();
                    });
                }
                self.read_part(&mut reader, 1 - cur, filling)
            })?;
            shared.check()?;
            base += len as u64;
            if self.part_done(len) {
                self.episode(|s| s.grow_claimed(true))?;
            }
            cur = 1 - cur;
            len = next_len;
        }
        self.episode(|s| s.grow_claimed(true))?;
        self.stats.overlap_violations = shared.violations.load(Ordering::SeqCst);
        Ok(())
    }

    fn paris_plus(&mut self, mut reader: SeriesReader) -> Result<()> {
        let shared = self.shared;
        let config = shared.config;
        let loaders = config.n_bulk_workers;
        let chunk = config.chunk_size();
        let series_bytes = config.series_bytes();

        let parts = [RwLock::new(Vec::new()), RwLock::new(Vec::new())];
        let cur = AtomicUsize::new(0);
        let len = AtomicUsize::new(0);
        let base = AtomicU64::new(0);
        let terminate = AtomicBool::new(false);
        // The coordinator starts a round once the loaders are parked, then
        // reads the next part while they summarize and grow the tree. Swaps
        // and flush episodes happen only while every loader is parked.
        // `loaded` separates summarizing from tree growth among the loaders.
        let round = Round::new(loaders);
        let loaded = Barrier::new(loaders);

        let first = self.read_part(&mut reader, 0, &mut parts[0].write().unwrap())?;
        len.store(first, Ordering::SeqCst);
        if first == 0 {
            terminate.store(true, Ordering::SeqCst);
        }

        std::thread::scope(|s| -> Result<()> {
            for j in 0..loaders {
                let (parts, cur, len, base, terminate, round, loaded) =
                    (&parts, &cur, &len, &base, &terminate, &round, &loaded);
                s.spawn(move || {
                    let mut scratch = Scratch::new(config);
                    let mut seen = 0;
                    loop {
                        round.wait_start(&mut seen);
                        if terminate.load(Ordering::SeqCst) {
                            return;
                        }
                        let c = cur.load(Ordering::SeqCst);
                        let n = len.load(Ordering::SeqCst);
                        let first = j * chunk;
                        if first < n && !shared.failed.load(Ordering::SeqCst) {
                            let last = (first + chunk).min(n);
                            let part = parts[c].read().unwrap();
                            shared.part_use[c].begin_read(&shared.violations);
                            let bytes = &part[first * series_bytes..last * series_bytes];
                            let pos = base.load(Ordering::SeqCst) + first as u64;
                            if let Err(e) = shared.summarize(bytes, pos, &mut scratch) {
                                shared.fail(e);
                            }
                            shared.part_use[c].end_read();
                        }
                        loaded.wait();
                        if let Err(e) = shared.grow_claimed(false) {
                            shared.fail(e);
                        }
                        round.finish();
                    }
                });
            }

            let mut outcome = Ok(());
            loop {
                round.start();
                if terminate.load(Ordering::SeqCst) {
                    break;
                }
                let c = cur.load(Ordering::SeqCst);
                let next = {
                    let mut buf = parts[1 - c].write().unwrap();
                    self.read_part(&mut reader, 1 - c, &mut buf)
                };
                round.wait_finished();
                shared.dirty.lock().unwrap().clear();

                let n = len.load(Ordering::SeqCst);
                let step = shared.check().and(next).and_then(|next| {
                    if self.part_done(n) {
                        self.episode(|s| s.flush_claimed())?;
                    }
                    Ok(next)
                });
                shared.claim.store(0, Ordering::SeqCst);
                match step {
                    Ok(next) => {
                        base.fetch_add(n as u64, Ordering::SeqCst);
                        cur.store(1 - c, Ordering::SeqCst);
                        len.store(next, Ordering::SeqCst);
                        if next == 0 {
                            terminate.store(true, Ordering::SeqCst);
                        }
                    }
                    Err(e) => {
                        outcome = Err(e);
                        terminate.store(true, Ordering::SeqCst);
                    }
                }
            }
            outcome
        })?;

        self.episode(|s| s.flush_claimed())?;
        self.stats.overlap_violations = shared.violations.load(Ordering::SeqCst);
        Ok(())
    }
}

/// Coordinator/loader rendezvous of ParIS+. Unlike a barrier, the
/// coordinator never waits for parked loaders to wake up: it only waits
/// for them to finish.
struct Round {
    loaders: usize,
    state: Mutex<RoundState>,
    started: Condvar,
    finished: Condvar,
}

#[derive(Default)]
struct RoundState {
    generation: u64,
    done: usize,
}

impl Round {
    fn new(loaders: usize) -> Round {
        Round {
            loaders,
            state: Mutex::new(RoundState::default()),
            started: Condvar::new(),
            finished: Condvar::new(),
        }
    }

    fn start(&self) {
        let mut st = self.state.lock().unwrap();
        st.generation += 1;
        st.done = 0;
        self.started.notify_all();
    }

    fn wait_start(&self, seen: &mut u64) {
        let mut st = self.state.lock().unwrap();
        while st.generation == *seen {
            st = self.started.wait(st).unwrap();
        }
        *seen = st.generation;
    }

    fn finish(&self) {
        let mut st = self.state.lock().unwrap();
        st.done += 1;
        if st.done == self.loaders {
            self.finished.notify_one();
        }
    }

    fn wait_finished(&self) {
        let mut st = self.state.lock().unwrap();
        while st.done < self.loaders {
            st = self.finished.wait(st).unwrap();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::RawWriter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_walks(path: &Path, count: usize, n: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = RawWriter::create(path, n).unwrap();
        for _ in 0..count {
            let mut x = 0.0f32;
            let s: Vec<f32> = (0..n)
                .map(|_| {
                    x += rng.random_range(-1.0f32..1.0);
                    x
                })
                .collect();
            w.write(&s).unwrap();
        }
        w.finish().unwrap();
    }

    fn small_config() -> IndexConfig {
        IndexConfig {
            series_len: 64,
            segments: 8,
            leaf_capacity: 20,
            buffer_part_bytes: 64 * 4 * 30,
            n_bulk_workers: 3,
            n_construction_workers: 2,
            ..IndexConfig::default()
        }
    }

    fn assert_complete(index: &Index, count: u64) {
        let mut all: Vec<u64> = index.leaf_positions().unwrap().into_values().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..count).collect::<Vec<_>>());
    }

    #[test]
    fn empty_file_gives_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("empty.bin");
        std::fs::write(&raw, []).unwrap();
        for v in [Variant::Paris, Variant::ParisPlus] {
            let (index, stats) = Builder::new(v, small_config()).build(&raw, dir.path().join(v.name())).unwrap();
            assert!(index.is_empty());
            assert_eq!(index.leaf_count(), 0);
            assert_eq!(stats.series, 0);
        }
    }

    #[test]
    fn variants_agree_and_are_complete() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        random_walks(&raw, 1001, 64, 5);
        let mut contents = Vec::new();
        for v in [Variant::Paris, Variant::ParisPlus] {
            let (index, stats) = Builder::new(v, small_config()).build(&raw, dir.path().join(v.name())).unwrap();
            assert_complete(&index, 1001);
            assert_eq!(stats.overlap_violations, 0);
            assert_eq!(stats.episodes, 1);
            assert!(index.subtrees().flat_map(|t| t.leaves()).all(|(_, l)| l.count <= 20));
            contents.push((index.sax().clone(), index.leaf_positions().unwrap()));
        }
        assert_eq!(contents[0], contents[1]);
    }

    #[test]
    fn tiny_budget_forces_several_episodes() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        random_walks(&raw, 700, 64, 9);
        let config = IndexConfig {
            memory_budget_bytes: 3_000,
            ..small_config()
        };
        let reference = Builder::new(Variant::Paris, small_config())
            .build(&raw, dir.path().join("ref"))
            .unwrap()
            .0
            .leaf_positions()
            .unwrap();
        for v in [Variant::Paris, Variant::ParisPlus] {
            let (index, stats) = Builder::new(v, config.clone()).build(&raw, dir.path().join(v.name())).unwrap();
            assert!(stats.episodes >= 3, "{stats:?}");
            assert_complete(&index, 700);
            assert_eq!(index.leaf_positions().unwrap(), reference);
        }
    }

    #[test]
    fn worker_counts_do_not_change_leaves() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        random_walks(&raw, 900, 64, 2);
        let mut seen = None;
        for (loaders, builders, part) in [(1, 1, 7), (4, 3, 50), (6, 6, 333)] {
            let config = IndexConfig {
                n_bulk_workers: loaders,
                n_construction_workers: builders,
                buffer_part_bytes: part * 64 * 4,
                ..small_config()
            };
            for v in [Variant::Paris, Variant::ParisPlus] {
                let out = dir.path().join(format!("{v}-{loaders}"));
                let leaves = Builder::new(v, config.clone()).build(&raw, &out).unwrap().0.leaf_positions().unwrap();
                match &seen {
                    None => seen = Some(leaves),
                    Some(s) => assert_eq!(s, &leaves),
                }
            }
        }
    }

    #[test]
    fn sax_array_matches_direct_summaries() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        random_walks(&raw, 150, 64, 4);
        let (index, _) = build_parisplus(&raw, dir.path().join("i"), &small_config()).unwrap();
        let file = crate::raw::RawFile::open(&raw, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let p = rng.random_range(0..150u64);
            let s = crate::series::znormalize(&file.read(p).unwrap()).unwrap();
            let paa = crate::series::compute_paa(&s, 8).unwrap();
            let mut word = [0u8; 8];
            full_symbols_into(&paa.means, &mut word);
            assert_eq!(index.sax().get(p as usize), &word);
        }
    }

    #[test]
    fn rejects_ragged_input_and_bad_config() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        std::fs::write(&raw, [0u8; 100]).unwrap();
        assert!(build_paris(&raw, dir.path().join("i"), &small_config()).is_err());
        let bad = IndexConfig {
            segments: 7,
            ..small_config()
        };
        assert!(matches!(build_paris(&raw, dir.path().join("i"), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        random_walks(&raw, 40, 64, 8);
        let mut s = crate::raw::read_all(&raw, 64).unwrap();
        s[64 * 33 + 5] = f32::NAN;
        let mut w = RawWriter::create(&raw, 64).unwrap();
        w.write(&s).unwrap();
        w.finish().unwrap();
        for v in [Variant::Paris, Variant::ParisPlus] {
            let err = Builder::new(v, small_config()).build(&raw, dir.path().join(v.name())).unwrap_err();
            assert!(err.to_string().contains("series 33"), "{err}");
        }
    }

    #[test]
    fn stale_files_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        random_walks(&raw, 50, 64, 3);
        let out = dir.path().join("i");
        std::fs::create_dir_all(&out).unwrap();
        std::fs::write(out.join("subtree-99999.leaves"), b"junk").unwrap();
        std::fs::write(out.join("keep.txt"), b"x").unwrap();
        build_paris(&raw, &out, &small_config()).unwrap();
        assert!(!out.join("subtree-99999.leaves").exists());
        assert!(out.join("keep.txt").exists());
    }

    #[test]
    fn progress_reports_phases() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        random_walks(&raw, 200, 64, 3);
        let seen = Mutex::new(Vec::new());
        let cb = |p: BuildProgress| seen.lock().unwrap().push(p);
        Builder::new(Variant::ParisPlus, small_config())
            .progress(&cb)
            .build(&raw, dir.path().join("i"))
            .unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen.last().unwrap().phase, Phase::Done);
        assert!(seen.iter().any(|p| p.phase == Phase::Constructing));
        let reads: Vec<u64> = seen.iter().filter(|p| p.phase == Phase::Reading).map(|p| p.series_read).collect();
        assert!(reads.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*reads.last().unwrap(), 200);
    }

    #[test]
    fn variant_parsing_and_defaults() {
        assert_eq!("paris+".parse::<Variant>().unwrap(), Variant::ParisPlus);
        assert!("nope".parse::<Variant>().is_err());
        assert_eq!(Variant::Paris.default_config(256).buffer_part_bytes, MIB);
        assert_eq!(Variant::ParisPlus.default_config(256).buffer_part_bytes, 5 * MIB);
    }
}
