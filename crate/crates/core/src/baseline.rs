//! Exact search without an index: a streaming serial scan and an in-memory
//! brute-force oracle.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distance::squared_euclidean_bounded;
use crate::error::{Error, Result};
use crate::query::QueryAnswer;
use crate::raw::SeriesReader;
use crate::series::{decode_le, znormalize_in_place};

/// Bytes per sequential read of the serial scan.
const SCAN_BLOCK_BYTES: usize = 8 << 20;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanStats {
    pub series_scanned: u64,
    pub bytes_read: u64,
    /// Distance computations cut short by the running best.
    pub early_abandoned: u64,
    pub wall_secs: f64,
}

fn check_query(query: &[f32], n: usize) -> Result<()> {
    if query.len() != n {
        return Err(Error::InvalidInput(format!(
            "query has {} points, expected {n}",
            query.len()
        )));
    }
    if let Some(i) = query.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("query has a non-finite value at point {i}")));
    }
    Ok(())
}

/// Nearest neighbor by reading the whole file sequentially, abandoning each
/// distance once it exceeds the best so far. With `normalize`, the query and
/// every series are z-normalized first.
pub fn serial_scan_nn(
    raw: impl AsRef<Path>,
    series_len: usize,
    query: &[f32],
    normalize: bool,
) -> Result<(QueryAnswer, ScanStats)> {
    check_query(query, series_len)?;
    let started = Instant::now();
    let mut q = query.to_vec();
    if normalize {
        znormalize_in_place(&mut q);
    }
    let mut reader = SeriesReader::open(raw, series_len)?;
    let per_block = (SCAN_BLOCK_BYTES / (series_len * 4)).max(1);
    let mut buf = Vec::new();
    let mut series = vec![0.0f32; series_len];
    let mut stats = ScanStats::default();
    let mut best = (f32::INFINITY, None);
    loop {
        let base = reader.position();
        let got = reader.read_block(&mut buf, per_block)?;
        if got == 0 {
            break;
        }
        stats.bytes_read += buf.len() as u64;
        for (i, bytes) in buf.chunks_exact(series_len * 4).enumerate() {
            decode_le(bytes, &mut series);
            if normalize {
                znormalize_in_place(&mut series);
            }
            match squared_euclidean_bounded(&q, &series, best.0) {
                Some(d) if d < best.0 => best = (d, Some(base + i as u64)),
                Some(_) => {}
                None => stats.early_abandoned += 1,
            }
        }
        stats.series_scanned += got as u64;
    }
    stats.wall_secs = started.elapsed().as_secs_f64();
    let position = best.1.ok_or(Error::NoAnswer)?;
    Ok((
        QueryAnswer {
            distance: best.0.sqrt(),
            position,
        },
        stats,
    ))
}

/// The `k` nearest members of `collection` (series of length `n` stored
/// back to back), computed exhaustively in double precision and sorted by
/// distance, then position.
pub fn brute_force_nn(
    collection: &[f32],
    n: usize,
    query: &[f32],
    k: usize,
    normalize: bool,
) -> Result<Vec<QueryAnswer>> {
    check_query(query, n)?;
    if collection.is_empty() || !collection.len().is_multiple_of(n) {
        return Err(Error::InvalidInput(format!(
            "collection of {} values is not a non-empty set of length-{n} series",
            collection.len()
        )));
    }
    let prepare = |s: &[f32]| -> Vec<f64> {
        let mut v = s.to_vec();
        if normalize {
            znormalize_in_place(&mut v);
        }
        v.into_iter().map(f64::from).collect()
    };
    let q = prepare(query);
    let mut all: Vec<(f64, u64)> = collection
        .chunks_exact(n)
        .enumerate()
        .map(|(i, s)| {
            let d: f64 = q.iter().zip(prepare(s)).map(|(a, b)| (a - b) * (a - b)).sum();
            (d.sqrt(), i as u64)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(all
        .into_iter()
        .take(k)
        .map(|(d, position)| QueryAnswer {
            distance: d as f32,
            position,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::RawWriter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(rng: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<f32> {
        (0..count * n).map(|_| rng.random_range(-3.0f32..3.0)).collect()
    }

    #[test]
    fn single_series_collection() {
        let a = brute_force_nn(&[1.0, 2.0, 3.0], 3, &[1.0, 2.0, 4.0], 1, false).unwrap();
        assert_eq!(a[0].position, 0);
        assert_eq!(a[0].distance, 1.0);
        assert!(brute_force_nn(&[], 3, &[0.0; 3], 1, false).is_err());
        assert!(brute_force_nn(&[0.0; 3], 3, &[0.0; 2], 1, false).is_err());
    }

    #[test]
    fn member_query_is_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = data(&mut rng, 50, 16);
        let q = d[16 * 7..16 * 8].to_vec();
        let a = brute_force_nn(&d, 16, &q, 3, true).unwrap();
        assert_eq!((a[0].position, a[0].distance), (7, 0.0));
        assert!(a[1].distance >= a[0].distance && a[2].distance >= a[1].distance);
    }

    #[test]
    fn agrees_with_independent_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let count = rng.random_range(1..40);
            let d = data(&mut rng, count, 8);
            let q = data(&mut rng, 1, 8);
            let mut best = (f64::INFINITY, 0);
            for i in 0..count {
                let mut s = 0.0f64;
                for j in 0..8 {
                    let diff = q[j] as f64 - d[i * 8 + j] as f64;
                    s += diff * diff;
                }
                if s.sqrt() < best.0 {
                    best = (s.sqrt(), i as u64);
                }
            }
            let a = brute_force_nn(&d, 8, &q, 1, false).unwrap()[0];
            assert!((a.distance as f64 - best.0).abs() <= 1e-6 * best.0.max(1.0));
            assert_eq!(a.position, best.1);
        }
    }

    #[test]
    fn scan_matches_brute_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = data(&mut rng, 700, 32);
        let mut w = RawWriter::create(&p, 32).unwrap();
        w.write(&d).unwrap();
        w.finish().unwrap();
        for normalize in [false, true] {
            for _ in 0..10 {
                let q = data(&mut rng, 1, 32);
                let (a, stats) = serial_scan_nn(&p, 32, &q, normalize).unwrap();
                let b = brute_force_nn(&d, 32, &q, 1, normalize).unwrap()[0];
                assert!((a.distance - b.distance).abs() <= 1e-4 * b.distance.max(1.0));
                assert_eq!(stats.series_scanned, 700);
                assert_eq!(stats.bytes_read, 700 * 32 * 4);
            }
        }
        let q = d[32 * 600..32 * 601].to_vec();
        assert_eq!(serial_scan_nn(&p, 32, &q, false).unwrap().0.distance, 0.0);
    }

    #[test]
    fn empty_file_has_no_answer() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        std::fs::write(&p, []).unwrap();
        assert!(matches!(serial_scan_nn(&p, 4, &[0.0; 4], false), Err(Error::NoAnswer)));
    }
}
