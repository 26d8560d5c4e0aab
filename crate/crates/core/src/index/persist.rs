//! Index directory layout:
//!
//! * `index.meta`: magic, format version, configuration and the serialized
//!   node tree of every root subtree (little-endian throughout);
//! * `sax.bin`: the SAX array, `w` bytes per series in raw-file order;
//! * `subtree-NNNNN.leaves`: leaf records of one root subtree, each leaf a
//!   contiguous run after persisting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Extent, Index, IndexConfig, Leaf, Node, NodeKind, SaxArray, Subtree};
use crate::error::{Error, IoContext, Result};
use crate::sax::SaxWord;

pub const META_FILE: &str = "index.meta";
pub const SAX_FILE: &str = "sax.bin";
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PARISIDX";

const TAG_INNER: u8 = 0;
const TAG_LEAF: u8 = 1;

/// Writes the metadata and SAX array into the index directory, compacting
/// every leaf file first so each leaf is one contiguous extent.
pub fn persist_index(index: &mut Index) -> Result<()> {
    let files = index.files();
    for t in index.subtrees.values_mut() {
        t.compact(&files)?;
    }
    let dir = index.dir.clone();

    let sax_path = dir.join(SAX_FILE);
    std::fs::write(&sax_path, index.sax.as_bytes()).with_path(&sax_path)?;

    let meta_path = dir.join(META_FILE);
    let tmp = dir.join(format!("{META_FILE}.tmp"));
    let mut out = Writer(BufWriter::new(File::create(&tmp).with_path(&tmp)?));
    write_meta(&mut out, index).with_path(&tmp)?;
    out.0.flush().with_path(&tmp)?;
    drop(out);
    std::fs::rename(&tmp, &meta_path).with_path(&meta_path)?;
    Ok(())
}

fn write_meta(out: &mut Writer, index: &Index) -> std::io::Result<()> {
    let c = &index.config;
    out.bytes(MAGIC)?;
    out.u32(FORMAT_VERSION)?;
    out.u64(c.series_len as u64)?;
    out.u32(c.segments as u32)?;
    out.u64(c.leaf_capacity as u64)?;
    out.u64(c.buffer_part_bytes as u64)?;
    out.u32(c.n_bulk_workers as u32)?;
    out.u32(c.n_construction_workers as u32)?;
    out.u32(c.lbc_per_core as u32)?;
    out.u32(c.rdc_per_core as u32)?;
    out.u64(c.memory_budget_bytes)?;
    out.u8(c.normalize as u8)?;
    out.u64(index.sax.len() as u64)?;
    let raw = index
        .raw_path
        .as_ref()
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.u32(raw.len() as u32)?;
    out.bytes(raw.as_bytes())?;

    out.u32(index.subtrees.len() as u32)?;
    for t in index.subtrees.values() {
        out.u32(t.id())?;
        out.u64(t.file_records())?;
        out.u32(t.nodes().len() as u32)?;
        for n in t.nodes() {
            out.bytes(n.word.symbols())?;
            out.bytes(n.word.card_bits())?;
            match &n.kind {
                NodeKind::Inner { segment, children } => {
                    out.u8(TAG_INNER)?;
                    out.u8(*segment)?;
                    out.u32(children[0])?;
                    out.u32(children[1])?;
                }
                NodeKind::Leaf(leaf) => {
                    out.u8(TAG_LEAF)?;
                    out.u64(leaf.count)?;
                    out.u32(leaf.extents.len() as u32)?;
                    for e in &leaf.extents {
                        out.u64(e.offset)?;
                        out.u64(e.count)?;
                    }
                }
            }
        }
    }
    out.bytes(b"END\0")
}

/// Loads an index and checks that every leaf file is long enough for the
/// extents the tree references.
pub fn load_index(dir: impl AsRef<Path>) -> Result<Index> {
    let index = load_index_unchecked(dir)?;
    let files = index.files();
    for t in index.subtrees.values() {
        let needed = t
            .leaves()
            .flat_map(|(_, l)| l.extents.iter())
            .map(|e| e.offset + e.count)
            .max()
            .unwrap_or(0)
            * files.record_len() as u64;
        if needed == 0 {
            continue;
        }
        let path = files.path(t.id());
        let len = std::fs::metadata(&path).with_path(&path)?.len();
        if len < needed {
            return Err(Error::Format {
                path,
                msg: format!("truncated leaf file: {len} bytes, extents need {needed}"),
            });
        }
    }
    Ok(index)
}

/// Loads metadata and the SAX array without touching leaf files.
pub fn load_index_unchecked(dir: impl AsRef<Path>) -> Result<Index> {
    let dir = dir.as_ref().to_path_buf();
    let meta_path = dir.join(META_FILE);
    let file = File::open(&meta_path).with_path(&meta_path)?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: meta_path.clone(),
    };
    let (config, count, raw_path, subtrees) = read_meta(&mut r)?;

    let sax_path = dir.join(SAX_FILE);
    let data = std::fs::read(&sax_path).with_path(&sax_path)?;
    let expected = count as usize * config.segments;
    if data.len() != expected {
        return Err(Error::Format {
            path: sax_path,
            msg: format!("expected {expected} bytes for {count} words, found {}", data.len()),
        });
    }
    let sax = SaxArray::new(config.segments, data)?;
    Ok(Index::from_parts(config, dir, sax, subtrees, raw_path))
}

type Meta = (IndexConfig, u64, Option<PathBuf>, BTreeMap<u32, Subtree>);

fn read_meta(r: &mut Reader) -> Result<Meta> {
    let mut magic = [0u8; 8];
    r.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(r.bad("not an index metadata file (bad magic number)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.bad(&format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let config = IndexConfig {
        series_len: r.u64()? as usize,
        segments: r.u32()? as usize,
        leaf_capacity: r.u64()? as usize,
        buffer_part_bytes: r.u64()? as usize,
        n_bulk_workers: r.u32()? as usize,
        n_construction_workers: r.u32()? as usize,
        lbc_per_core: r.u32()? as usize,
        rdc_per_core: r.u32()? as usize,
        memory_budget_bytes: r.u64()?,
        normalize: r.u8()? != 0,
        read_throttle: None,
    };
    config.validate().map_err(|e| r.bad(&e.to_string()))?;
    let w = config.segments;
    let count = r.u64()?;
    let raw_len = r.u32()? as usize;
    let mut raw = vec![0u8; raw_len];
    r.exact(&mut raw)?;
    let raw_path = (!raw.is_empty())
        .then(|| String::from_utf8(raw).map(PathBuf::from))
        .transpose()
        .map_err(|_| r.bad("raw file path is not UTF-8"))?;

    let n_subtrees = r.u32()?;
    let mut subtrees = BTreeMap::new();
    for _ in 0..n_subtrees {
        let id = r.u32()?;
        let file_records = r.u64()?;
        let n_nodes = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
        for _ in 0..n_nodes {
            let mut symbols = [0u8; 16];
            let mut bits = [0u8; 16];
            r.exact(&mut symbols[..w])?;
            r.exact(&mut bits[..w])?;
            let word = SaxWord::new(&symbols[..w], &bits[..w]).map_err(|e| r.bad(&e.to_string()))?;
            let kind = match r.u8()? {
                TAG_INNER => {
                    let segment = r.u8()?;
                    let children = [r.u32()?, r.u32()?];
                    if children.iter().any(|&c| c as usize >= n_nodes) || segment as usize >= w {
                        return Err(r.bad(&format!("corrupt inner node in subtree {id}")));
                    }
                    NodeKind::Inner { segment, children }
                }
                TAG_LEAF => {
                    let count = r.u64()?;
                    let n_ext = r.u32()? as usize;
                    let mut extents = Vec::with_capacity(n_ext.min(1024));
                    for _ in 0..n_ext {
                        extents.push(Extent {
                            offset: r.u64()?,
                            count: r.u64()?,
                        });
                    }
                    NodeKind::Leaf(Leaf {
                        buffer: Vec::new(),
                        extents,
                        count,
                    })
                }
                t => return Err(r.bad(&format!("unknown node tag {t}"))),
            };
            nodes.push(Node { word, kind });
        }
        if nodes.is_empty() {
            return Err(r.bad(&format!("subtree {id} has no nodes")));
        }
        subtrees.insert(id, Subtree::from_parts(id, nodes, file_records));
    }
    let mut end = [0u8; 4];
    r.exact(&mut end)?;
    if &end != b"END\0" {
        return Err(r.bad("missing end marker"));
    }
    Ok((config, count, raw_path, subtrees))
}

struct Writer(BufWriter<File>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.0.write_all(b)
    }
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
}

struct Reader {
    inner: BufReader<File>,
    path: PathBuf,
}

impl Reader {
    fn bad(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            msg: msg.to_string(),
        }
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.bad("truncated metadata file")
            } else {
                Error::Io {
                    path: self.path.clone(),
                    source: e,
                }
            }
        })
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}
