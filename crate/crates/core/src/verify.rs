//! Structural checks over a persisted index and its raw data file.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::index::{load_index_unchecked, Index, LeafEntry, NodeKind};
use crate::raw::RawFile;
use crate::sax::full_symbols_into;
use crate::series::{paa_into, znormalize_in_place};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, problems: &[String], ok_detail: String) {
        let passed = problems.is_empty();
        let detail = if passed {
            ok_detail
        } else {
            let mut d = problems.iter().take(5).cloned().collect::<Vec<_>>().join("; ");
            if problems.len() > 5 {
                d.push_str(&format!("; and {} more", problems.len() - 5));
            }
            d
        };
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{mark}  {:width$}  {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Loads the index in `dir` and checks it. Metadata that cannot be loaded
/// at all is an error; anything else is reported as a failed check.
pub fn verify_dir(dir: impl AsRef<Path>, raw: Option<&Path>, sample: usize) -> Result<VerifyReport> {
    let index = load_index_unchecked(dir)?;
    verify_index(&index, raw, sample)
}

/// Runs every check on `index`. SAX alignment is checked on `sample` random
/// positions of `raw` (or the index's recorded raw file).
pub fn verify_index(index: &Index, raw: Option<&Path>, sample: usize) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let files = index.files();
    let config = index.config();
    let w = config.segments;
    let total = index.series_count();

    // Leaf files hold every referenced extent.
    let mut problems = Vec::new();
    for t in index.subtrees() {
        let path = files.path(t.id());
        let len = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        for (i, leaf) in t.leaves() {
            for e in &leaf.extents {
                let end = (e.offset + e.count) * files.record_len() as u64;
                if end > len {
                    problems.push(format!(
                        "leaf {} ({}) needs {end} bytes of {} which has {len}",
                        t.nodes()[i].word,
                        format_args!("subtree {} node {i}", t.id()),
                        path.display()
                    ));
                }
            }
        }
    }
    let files_ok = problems.is_empty();
    report.push("leaf files", &problems, format!("{} subtree files", index.subtrees().count()));
    if !files_ok {
        return Ok(report);
    }

    // Read every leaf once; the remaining tree checks share the contents.
    let mut seen = vec![0u8; total as usize];
    let (mut completeness, mut containment, mut occupancy, mut alignment) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut leaves = 0usize;
    for t in index.subtrees() {
        if !t.root().word.card_bits().iter().all(|&b| b == 1) || t.root().word.root_subtree_id() != t.id() {
            containment.push(format!("subtree {} root word {} is not its root child", t.id(), t.root().word));
        }
        for (i, node) in t.nodes().iter().enumerate() {
            match &node.kind {
                NodeKind::Inner { segment, children } => {
                    for (bit, &c) in children.iter().enumerate() {
                        let child = t.nodes()[c as usize].word;
                        let expected = node.word.refine_segment(*segment as usize).map(|(a, b)| [a, b][bit]);
                        if expected.ok() != Some(child) {
                            containment.push(format!(
                                "node {c} of subtree {} ({child}) is not child {bit} of {} on segment {segment}",
                                t.id(),
                                node.word
                            ));
                        }
                    }
                }
                NodeKind::Leaf(leaf) => {
                    leaves += 1;
                    let entries: Vec<LeafEntry> = t.leaf_entries(i, &files)?;
                    if entries.len() as u64 != leaf.count {
                        completeness.push(format!(
                            "leaf {} holds {} entries but records {}",
                            node.word,
                            entries.len(),
                            leaf.count
                        ));
                    }
                    if entries.len() > config.leaf_capacity {
                        occupancy.push(format!(
                            "leaf {} holds {} entries (capacity {})",
                            node.word,
                            entries.len(),
                            config.leaf_capacity
                        ));
                    }
                    for e in &entries {
                        if !node.word.contains(e.word(w)) {
                            containment.push(format!("position {} is outside leaf {}", e.pos, node.word));
                        }
                        match seen.get_mut(e.pos as usize) {
                            Some(s) => *s = s.saturating_add(1),
                            None => completeness.push(format!("position {} is past the end ({total})", e.pos)),
                        }
                        if (e.pos as usize) < index.sax().len() && index.sax().get(e.pos as usize) != e.word(w) {
                            alignment.push(format!("leaf word of position {} differs from the SAX array", e.pos));
                        }
                    }
                }
            }
        }
    }
    for (p, &c) in seen.iter().enumerate() {
        match c {
            1 => {}
            0 => completeness.push(format!("position {p} is missing")),
            _ => completeness.push(format!("position {p} appears {c} times")),
        }
    }
    report.push("completeness", &completeness, format!("{total} positions, each once"));
    report.push("prefix containment", &containment, format!("{} nodes", index.node_count()));
    report.push("occupancy", &occupancy, format!("{leaves} leaves within {}", config.leaf_capacity));

    // SAX array against the raw data.
    let raw = raw.or(index.raw_path());
    match raw {
        None => alignment.push("no raw data file given or recorded".into()),
        Some(raw) => match RawFile::open(raw, config.series_len) {
            Err(e) => alignment.push(e.to_string()),
            Ok(file) if file.len() != total => alignment.push(format!(
                "{} holds {} series, the index {total}",
                raw.display(),
                file.len()
            )),
            Ok(file) => {
                let mut rng = ChaCha8Rng::seed_from_u64(total);
                let mut series = vec![0.0; config.series_len];
                let mut paa = vec![0.0; w];
                let mut word = vec![0u8; w];
                let mut scratch = Vec::new();
                for _ in 0..sample.min(total as usize) {
                    let p = rng.random_range(0..total);
                    file.read_into(p, &mut scratch, &mut series)?;
                    if config.normalize {
                        znormalize_in_place(&mut series);
                    }
                    paa_into(&series, &mut paa);
                    full_symbols_into(&paa, &mut word);
                    if index.sax().get(p as usize) != word.as_slice() {
                        alignment.push(format!("SAX entry {p} does not match the raw series"));
                    }
                }
            }
        },
    }
    report.push(
        "sax alignment",
        &alignment,
        format!("{} sampled positions recomputed", sample.min(total as usize)),
    );
    Ok(report)
}
