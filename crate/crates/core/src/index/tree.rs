//! One root subtree of the index: an arena of inner nodes and leaves. Leaves
//! keep pending entries in memory (their output buffer) and reference the
//! already materialized ones by extents in the subtree's leaf file.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::sax::{next_bit, SaxWord, MAX_CARD_BITS, MAX_SEGMENTS};

/// A summarized series in a leaf: its full-cardinality word and its position
/// in the raw data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafEntry {
    pub sax: [u8; MAX_SEGMENTS],
    pub pos: u64,
}

impl LeafEntry {
    pub fn new(word: &[u8], pos: u64) -> LeafEntry {
        let mut sax = [0; MAX_SEGMENTS];
        sax[..word.len()].copy_from_slice(word);
        LeafEntry { sax, pos }
    }

    #[inline]
    pub fn word(&self, w: usize) -> &[u8] {
        &self.sax[..w]
    }
}

/// A contiguous run of records in a subtree's leaf file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Leaf {
    /// Entries not yet written to disk.
    pub buffer: Vec<LeafEntry>,
    pub extents: Vec<Extent>,
    /// Entries in memory and on disk together.
    pub count: u64,
}

impl Leaf {
    pub fn disk_count(&self) -> u64 {
        self.extents.iter().map(|e| e.count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Inner { segment: u8, children: [u32; 2] },
    Leaf(Leaf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub word: SaxWord,
    pub kind: NodeKind,
}

impl Node {
    pub fn leaf(&self) -> Option<&Leaf> {
        match &self.kind {
            NodeKind::Leaf(l) => Some(l),
            NodeKind::Inner { .. } => None,
        }
    }

    fn leaf_mut(&mut self) -> &mut Leaf {
        match &mut self.kind {
            NodeKind::Leaf(l) => l,
            NodeKind::Inner { .. } => unreachable!("not a leaf"),
        }
    }
}

/// On-disk leaf records: `w` symbol bytes then the position as a
/// little-endian `u64`.
#[derive(Debug, Clone)]
pub struct LeafFiles {
    dir: PathBuf,
    w: usize,
}

impl LeafFiles {
    pub fn new(dir: impl Into<PathBuf>, w: usize) -> LeafFiles {
        LeafFiles { dir: dir.into(), w }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record_len(&self) -> usize {
        self.w + 8
    }

    pub fn path(&self, subtree: u32) -> PathBuf {
        self.dir.join(format!("subtree-{subtree:05}.leaves"))
    }

    pub fn encode(&self, entries: &[LeafEntry], out: &mut Vec<u8>) {
        out.clear();
        out.reserve(entries.len() * self.record_len());
        for e in entries {
            out.extend_from_slice(e.word(self.w));
            out.extend_from_slice(&e.pos.to_le_bytes());
        }
    }

    pub fn decode(&self, bytes: &[u8], out: &mut Vec<LeafEntry>) {
        for rec in bytes.chunks_exact(self.record_len()) {
            let (word, pos) = rec.split_at(self.w);
            out.push(LeafEntry::new(word, u64::from_le_bytes(pos.try_into().unwrap())));
        }
    }

    pub(crate) fn open_write(&self, subtree: u32) -> Result<File> {
        let path = self.path(subtree);
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .with_path(path)
    }

    pub(crate) fn write_at(&self, file: &File, subtree: u32, offset: u64, entries: &[LeafEntry]) -> Result<()> {
        let mut bytes = Vec::new();
        self.encode(entries, &mut bytes);
        file.write_all_at(&bytes, offset * self.record_len() as u64)
            .with_path(self.path(subtree))
    }

    /// Appends the records of `extent` to `out`.
    pub fn read_extent(&self, file: &File, subtree: u32, extent: Extent, out: &mut Vec<LeafEntry>) -> Result<()> {
        let mut bytes = vec![0u8; extent.count as usize * self.record_len()];
        file.read_exact_at(&mut bytes, extent.offset * self.record_len() as u64)
            .with_path(self.path(subtree))?;
        self.decode(&bytes, out);
        Ok(())
    }

    pub fn open_read(&self, subtree: u32) -> Result<File> {
        let path = self.path(subtree);
        File::open(&path).with_path(path)
    }
}

/// Picks the segment whose next bit splits `entries` most evenly: the
/// smallest `|zeros - ones|` among segments still below 8 bits, lowest
/// segment index on ties. `None` when every segment is at full precision.
pub fn choose_split_segment(word: &SaxWord, entries: &[LeafEntry]) -> Option<usize> {
    let w = word.segments();
    let mut ones = [0u64; MAX_SEGMENTS];
    let bits = &word.card_bits()[..w];
    for e in entries {
        for ((count, &sym), &b) in ones.iter_mut().zip(&e.sax).zip(bits) {
            if b < MAX_CARD_BITS {
                *count += next_bit(sym, b) as u64;
            }
        }
    }
    let total = entries.len() as u64;
    (0..w)
        .filter(|&seg| word.card_bits()[seg] < MAX_CARD_BITS)
        .min_by_key(|&seg| (total.abs_diff(2 * ones[seg]), seg))
}

/// Index tree below one root child.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtree {
    id: u32,
    nodes: Vec<Node>,
    /// Records appended to this subtree's leaf file so far.
    file_records: u64,
}

impl Subtree {
    /// A subtree holding a single empty leaf: the root child itself.
    pub fn new(id: u32, word: SaxWord) -> Subtree {
        Subtree {
            id,
            nodes: vec![Node {
                word,
                kind: NodeKind::Leaf(Leaf::default()),
            }],
            file_records: 0,
        }
    }

    pub(crate) fn from_parts(id: u32, nodes: Vec<Node>, file_records: u64) -> Subtree {
        Subtree {
            id,
            nodes,
            file_records,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn file_records(&self) -> u64 {
        self.file_records
    }

    pub fn leaves(&self) -> impl Iterator<Item = (usize, &Leaf)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.leaf().map(|l| (i, l)))
    }

    /// Total entries across the subtree's leaves.
    pub fn len(&self) -> u64 {
        self.leaves().map(|(_, l)| l.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node index of the leaf whose region contains the full word.
    pub fn route(&self, full: &[u8]) -> usize {
        let mut at = 0;
        while let NodeKind::Inner { segment, children } = &self.nodes[at].kind {
            let seg = *segment as usize;
            at = children[self.nodes[at].word.next_bit(full, seg)] as usize;
        }
        at
    }

    pub fn insert(&mut self, entry: LeafEntry, capacity: usize, files: &LeafFiles) -> Result<()> {
        let w = self.nodes[0].word.segments();
        let mut at = self.route(entry.word(w));
        loop {
            let leaf = self.nodes[at].leaf_mut();
            if leaf.count < capacity as u64 {
                leaf.buffer.push(entry);
                leaf.count += 1;
                return Ok(());
            }
            self.split_leaf(at, files)?;
            at = self.route_from(at, entry.word(w));
        }
    }

    fn route_from(&self, mut at: usize, full: &[u8]) -> usize {
        while let NodeKind::Inner { segment, children } = &self.nodes[at].kind {
            at = children[self.nodes[at].word.next_bit(full, *segment as usize)] as usize;
        }
        at
    }

    /// All entries of leaf `at`, materialized ones first.
    pub fn leaf_entries(&self, at: usize, files: &LeafFiles) -> Result<Vec<LeafEntry>> {
        let leaf = self.nodes[at]
            .leaf()
            .ok_or_else(|| Error::InvalidInput(format!("node {at} is not a leaf")))?;
        let mut out = Vec::with_capacity(leaf.count as usize);
        if !leaf.extents.is_empty() {
            let file = files.open_read(self.id)?;
            for &e in &leaf.extents {
                files.read_extent(&file, self.id, e, &mut out)?;
            }
        }
        out.extend_from_slice(&leaf.buffer);
        Ok(out)
    }

    /// Turns leaf `at` into an inner node with two fresh leaves, moving every
    /// entry (reloading flushed ones) into the child selected by the refined
    /// segment's new bit. The parent's extents are dropped; their space in
    /// the leaf file is reclaimed at persist time.
    pub fn split_leaf(&mut self, at: usize, files: &LeafFiles) -> Result<[u32; 2]> {
        let entries = self.leaf_entries(at, files)?;
        let word = self.nodes[at].word;
        let leaf = self.nodes[at].leaf_mut();
        leaf.extents.clear();
        leaf.buffer = entries;
        let Some(seg) = choose_split_segment(&word, &leaf.buffer) else {
            return Err(Error::IndexFull {
                word: word.to_string(),
                entries: leaf.buffer.len(),
            });
        };
        let entries = std::mem::take(&mut leaf.buffer);
        let (w0, w1) = word.refine_segment(seg)?;
        let (mut zero, mut one) = (Vec::new(), Vec::new());
        for e in entries {
            if next_bit(e.sax[seg], word.card_bits()[seg]) == 0 {
                zero.push(e);
            } else {
                one.push(e);
            }
        }
        let first = self.nodes.len() as u32;
        for (word, buffer) in [(w0, zero), (w1, one)] {
            let count = buffer.len() as u64;
            self.nodes.push(Node {
                word,
                kind: NodeKind::Leaf(Leaf {
                    buffer,
                    extents: Vec::new(),
                    count,
                }),
            });
        }
        let children = [first, first + 1];
        self.nodes[at].kind = NodeKind::Inner {
            segment: seg as u8,
            children,
        };
        Ok(children)
    }

    /// Writes leaf `at`'s output buffer to the end of the subtree file and
    /// clears it. Returns the new extent, or `None` if the buffer was empty.
    pub fn flush_leaf(&mut self, at: usize, files: &LeafFiles) -> Result<Option<Extent>> {
        if self.nodes[at].leaf().is_none_or(|l| l.buffer.is_empty()) {
            return Ok(None);
        }
        let file = files.open_write(self.id)?;
        self.flush_leaf_with(&file, at, files)
    }

    fn flush_leaf_with(&mut self, file: &File, at: usize, files: &LeafFiles) -> Result<Option<Extent>> {
        let offset = self.file_records;
        let id = self.id;
        let leaf = self.nodes[at].leaf_mut();
        if leaf.buffer.is_empty() {
            return Ok(None);
        }
        files.write_at(file, id, offset, &leaf.buffer)?;
        let extent = Extent {
            offset,
            count: leaf.buffer.len() as u64,
        };
        leaf.extents.push(extent);
        leaf.buffer = Vec::new();
        self.file_records += extent.count;
        Ok(Some(extent))
    }

    /// Flushes every leaf with pending entries.
    pub fn flush_all(&mut self, files: &LeafFiles) -> Result<usize> {
        let pending: Vec<usize> = self
            .leaves()
            .filter(|(_, l)| !l.buffer.is_empty())
            .map(|(i, _)| i)
            .collect();
        if pending.is_empty() {
            return Ok(0);
        }
        // The extents are consecutive in the file, so one write covers them.
        let start = self.file_records;
        let mut batch = Vec::new();
        for &at in &pending {
            let leaf = self.nodes[at].leaf_mut();
            let extent = Extent {
                offset: self.file_records,
                count: leaf.buffer.len() as u64,
            };
            batch.append(&mut leaf.buffer);
            leaf.buffer = Vec::new();
            leaf.extents.push(extent);
            self.file_records += extent.count;
        }
        let file = files.open_write(self.id)?;
        files.write_at(&file, self.id, start, &batch)?;
        Ok(pending.len())
    }

    /// Entries held in output buffers.
    pub fn buffered(&self) -> u64 {
        self.leaves().map(|(_, l)| l.buffer.len() as u64).sum()
    }

    /// Rewrites the leaf file so each leaf occupies one contiguous extent,
    /// dropping space left behind by splits. Pending buffers are written too.
    pub(crate) fn compact(&mut self, files: &LeafFiles) -> Result<()> {
        let leaves: Vec<usize> = self.leaves().map(|(i, _)| i).collect();
        let mut contents = Vec::with_capacity(leaves.len());
        for &at in &leaves {
            contents.push(self.leaf_entries(at, files)?);
        }
        let path = files.path(self.id);
        let tmp = path.with_extension("leaves.tmp");
        let file = File::create(&tmp).with_path(&tmp)?;
        let mut offset = 0u64;
        for (&at, entries) in leaves.iter().zip(contents) {
            files.write_at(&file, self.id, offset, &entries)?;
            let leaf = self.nodes[at].leaf_mut();
            leaf.buffer = Vec::new();
            leaf.extents = if entries.is_empty() {
                Vec::new()
            } else {
                vec![Extent {
                    offset,
                    count: entries.len() as u64,
                }]
            };
            leaf.count = entries.len() as u64;
            offset += entries.len() as u64;
        }
        file.sync_all().with_path(&tmp)?;
        drop(file);
        std::fs::rename(&tmp, &path).with_path(&path)?;
        self.file_records = offset;
        Ok(())
    }
}
