//! The iSAX index: configuration, the SAX array, root subtrees and their
//! on-disk leaves.

mod persist;
mod tree;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sax::{root_id_of, SaxWord, MAX_SEGMENTS};

pub use persist::{load_index, load_index_unchecked, persist_index, FORMAT_VERSION, META_FILE, SAX_FILE};
pub use tree::{choose_split_segment, Extent, Leaf, LeafEntry, LeafFiles, Node, NodeKind, Subtree};

pub const MIB: usize = 1 << 20;

/// Build and query tuning knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Points per series.
    pub series_len: usize,
    /// Segments per word.
    pub segments: usize,
    /// Maximum entries per leaf.
    pub leaf_capacity: usize,
    /// Bytes in each half of the raw data double buffer.
    pub buffer_part_bytes: usize,
    pub n_bulk_workers: usize,
    pub n_construction_workers: usize,
    pub lbc_per_core: usize,
    pub rdc_per_core: usize,
    /// Estimated bytes of buffered entries that trigger tree construction
    /// and leaf materialization.
    pub memory_budget_bytes: u64,
    /// Z-normalize series (and queries) before summarizing and comparing.
    pub normalize: bool,
    /// Simulated read throughput cap for the raw file, bytes per second.
    pub read_throttle: Option<f64>,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            series_len: 256,
            segments: 16,
            leaf_capacity: 2000,
            buffer_part_bytes: 2 * MIB,
            n_bulk_workers: 5,
            n_construction_workers: 6,
            lbc_per_core: 1,
            rdc_per_core: 5,
            memory_budget_bytes: 1 << 30,
            normalize: true,
            read_throttle: None,
        }
    }
}

/// Memory held per series between episodes: its buffered leaf entry. Raw
/// values are dropped after summarizing and the SAX array is permanent.
pub(crate) const ENTRY_OVERHEAD: usize = std::mem::size_of::<LeafEntry>();

impl IndexConfig {
    pub fn with_series_len(series_len: usize) -> IndexConfig {
        IndexConfig {
            series_len,
            ..IndexConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.series_len == 0 {
            return fail("series length must be positive".into());
        }
        if !(1..=MAX_SEGMENTS).contains(&self.segments) {
            return fail(format!("segments must be in 1..={MAX_SEGMENTS}, got {}", self.segments));
        }
        if !self.series_len.is_multiple_of(self.segments) {
            return fail(format!(
                "segments ({}) must divide the series length ({})",
                self.segments, self.series_len
            ));
        }
        for (name, v) in [
            ("leaf capacity", self.leaf_capacity),
            ("bulk-loading workers", self.n_bulk_workers),
            ("construction workers", self.n_construction_workers),
            ("LBC workers per core", self.lbc_per_core),
            ("RDC workers per core", self.rdc_per_core),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.buffer_part_bytes < self.series_bytes() {
            return fail(format!(
                "buffer part of {} bytes cannot hold one {}-byte series",
                self.buffer_part_bytes,
                self.series_bytes()
            ));
        }
        if self.memory_budget_bytes == 0 {
            return fail("memory budget must be positive".into());
        }
        Ok(())
    }

    pub fn series_bytes(&self) -> usize {
        self.series_len * 4
    }

    /// Series per bulk-loading chunk: each buffer part holds one chunk per
    /// bulk-loading worker.
    pub fn chunk_size(&self) -> usize {
        (self.buffer_part_bytes / self.series_bytes() / self.n_bulk_workers).max(1)
    }

    pub fn part_series(&self) -> usize {
        self.chunk_size() * self.n_bulk_workers
    }

    pub(crate) fn bytes_per_series(&self) -> u64 {
        ENTRY_OVERHEAD as u64
    }
}

/// Full-cardinality words, entry `p` summarizing raw-file series `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaxArray {
    w: usize,
    data: Vec<u8>,
}

impl SaxArray {
    pub fn new(w: usize, data: Vec<u8>) -> Result<SaxArray> {
        if w == 0 || !data.len().is_multiple_of(w) {
            return Err(Error::InvalidInput(format!(
                "{} bytes is not a whole number of {w}-symbol words",
                data.len()
            )));
        }
        Ok(SaxArray { w, data })
    }

    pub fn segments(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.w
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, p: usize) -> &[u8] {
        &self.data[p * self.w..(p + 1) * self.w]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }
}

/// A built (or loaded) index rooted in a directory holding the leaf files.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    config: IndexConfig,
    dir: PathBuf,
    sax: SaxArray,
    subtrees: BTreeMap<u32, Subtree>,
    raw_path: Option<PathBuf>,
}

impl Index {
    pub(crate) fn from_parts(
        config: IndexConfig,
        dir: PathBuf,
        sax: SaxArray,
        subtrees: BTreeMap<u32, Subtree>,
        raw_path: Option<PathBuf>,
    ) -> Index {
        Index {
            config,
            dir,
            sax,
            subtrees,
            raw_path,
        }
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn sax(&self) -> &SaxArray {
        &self.sax
    }

    /// The raw data file the index was built from, if recorded.
    pub fn raw_path(&self) -> Option<&Path> {
        self.raw_path.as_deref()
    }

    pub fn series_count(&self) -> u64 {
        self.sax.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.sax.is_empty()
    }

    pub fn files(&self) -> LeafFiles {
        LeafFiles::new(&self.dir, self.config.segments)
    }

    pub fn subtrees(&self) -> impl Iterator<Item = &Subtree> {
        self.subtrees.values()
    }

    pub fn subtree(&self, id: u32) -> Option<&Subtree> {
        self.subtrees.get(&id)
    }

    pub fn leaf_count(&self) -> usize {
        self.subtrees.values().map(|t| t.leaves().count()).sum()
    }

    pub fn node_count(&self) -> usize {
        self.subtrees.values().map(|t| t.nodes().len()).sum()
    }

    /// Leaf reached by a full-cardinality word, as (subtree id, node index).
    /// `None` when the word's root child does not exist.
    pub fn route_to_leaf(&self, full: &[u8]) -> Option<(u32, usize)> {
        let id = root_id_of(full);
        self.subtrees.get(&id).map(|t| (id, t.route(full)))
    }

    /// Positions stored in every leaf, keyed by the leaf's word, each list
    /// sorted ascending.
    pub fn leaf_positions(&self) -> Result<HashMap<SaxWord, Vec<u64>>> {
        let files = self.files();
        let mut out = HashMap::new();
        for t in self.subtrees.values() {
            for (i, _) in t.leaves() {
                let mut pos: Vec<u64> = t.leaf_entries(i, &files)?.iter().map(|e| e.pos).collect();
                pos.sort_unstable();
                out.insert(t.nodes()[i].word, pos);
            }
        }
        Ok(out)
    }
}
