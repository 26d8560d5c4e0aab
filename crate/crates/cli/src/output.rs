use std::io::Write;

use paris_core::QueryMetrics;
use serde::Serialize;
use statrs::statistics::Statistics;

/// Output sink: aligned tables or one JSON object per line.
pub struct Out {
    pub json: bool,
}

impl Out {
    pub fn new(json: bool) -> Out {
        Out { json }
    }

    pub fn line(&mut self, value: &serde_json::Value) {
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "{value}");
    }
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Table {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    /// First column left-aligned, the rest right-aligned.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        for r in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }

    pub fn print(&self) {
        print!("{}", self.render());
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Aggregate {
    pub queries: usize,
    pub mean_secs: f64,
    pub mean_raw_reads: f64,
    pub total_raw_reads: u64,
    pub mean_bsf_updates: f64,
    pub total_bsf_updates: u64,
    pub mean_lb_computed: f64,
    pub mean_pruning: f64,
}

pub fn aggregate(metrics: &[QueryMetrics]) -> Aggregate {
    if metrics.is_empty() {
        return Aggregate::default();
    }
    let mean = |f: fn(&QueryMetrics) -> f64| metrics.iter().map(f).mean();
    Aggregate {
        queries: metrics.len(),
        mean_secs: mean(|m| m.total_secs),
        mean_raw_reads: mean(|m| m.raw_reads as f64),
        total_raw_reads: metrics.iter().map(|m| m.raw_reads).sum(),
        mean_bsf_updates: mean(|m| m.bsf_updates as f64),
        total_bsf_updates: metrics.iter().map(|m| m.bsf_updates).sum(),
        mean_lb_computed: mean(|m| m.lb_computed as f64),
        mean_pruning: mean(|m| m.pruning_ratio),
    }
}

/// Mean, sample standard deviation, minimum and maximum.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Spread {
        let stddev = if xs.len() > 1 { xs.std_dev() } else { 0.0 };
        Spread {
            mean: xs.mean(),
            stddev,
            min: xs.min(),
            max: xs.max(),
        }
    }
}
