//! Synthetic random-walk datasets and query sets.
//!
//! Series `i` draws from its own ChaCha8 stream of the seeded key, so the
//! output does not depend on how generation is split across threads. Query
//! sets use streams with the top bit set, disjoint from any dataset stream.
//! Gaussian steps come from the ziggurat sampler of `rand_distr`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::RawWriter;
use crate::series::znormalize_in_place;

/// Queries generated when no count is given.
pub const DEFAULT_QUERY_COUNT: u64 = 100;

const QUERY_STREAM: u64 = 1 << 63;
const BATCH: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenSpec {
    pub count: u64,
    pub length: usize,
    pub seed: u64,
    pub normalize: bool,
}

impl GenSpec {
    pub fn new(count: u64, length: usize, seed: u64) -> GenSpec {
        GenSpec {
            count,
            length,
            seed,
            normalize: false,
        }
    }
}

/// One random walk: a standard normal start, then standard normal steps.
pub fn random_walk(seed: u64, stream: u64, length: usize, normalize: bool) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut x = 0.0f64;
    let mut out: Vec<f32> = (0..length)
        .map(|_| {
            x += rng.sample::<f64, _>(StandardNormal);
            x as f32
        })
        .collect();
    if normalize {
        znormalize_in_place(&mut out);
    }
    out
}

fn write_streams(spec: &GenSpec, first_stream: u64, path: &Path) -> Result<u64> {
    if spec.length == 0 {
        return Err(Error::Config("series length must be positive".into()));
    }
    let mut out = RawWriter::create(path, spec.length)?;
    let mut start = 0;
    while start < spec.count {
        let end = (start + BATCH).min(spec.count);
        let values: Vec<f32> = (start..end)
            .into_par_iter()
            .flat_map_iter(|i| random_walk(spec.seed, first_stream + i, spec.length, spec.normalize))
            .collect();
        out.write(&values)?;
        start = end;
    }
    out.finish()
}

/// Writes `spec.count` random walks to `path` in the raw file format.
pub fn generate_random_walk(spec: &GenSpec, path: impl AsRef<Path>) -> Result<u64> {
    write_streams(spec, 0, path.as_ref())
}

/// Writes a query set drawn from streams no dataset uses.
pub fn generate_queries(spec: &GenSpec, path: impl AsRef<Path>) -> Result<u64> {
    write_streams(spec, QUERY_STREAM, path.as_ref())
}

/// The queries [`generate_queries`] would write, in memory.
pub fn query_set(spec: &GenSpec) -> Vec<Vec<f32>> {
    (0..spec.count)
        .into_par_iter()
        .map(|i| random_walk(spec.seed, QUERY_STREAM + i, spec.length, spec.normalize))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::read_all;

    #[test]
    fn empty_spec_gives_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        assert_eq!(generate_random_walk(&GenSpec::new(0, 256, 1), &p).unwrap(), 0);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 0);
        assert!(generate_random_walk(&GenSpec::new(1, 0, 1), &p).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec::new(5000, 64, 42);
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_random_walk(&spec, &a).unwrap();
        generate_random_walk(&spec, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let c = dir.path().join("c");
        generate_random_walk(&GenSpec { seed: 43, ..spec }, &c).unwrap();
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn thread_count_does_not_matter() {
        let spec = GenSpec::new(300, 32, 7);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let threaded = pool.install(|| query_set(&spec));
        let serial: Vec<Vec<f32>> = (0..300).map(|i| random_walk(7, QUERY_STREAM + i, 32, false)).collect();
        assert_eq!(threaded, serial);
    }

    #[test]
    fn normalized_moments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.bin");
        let spec = GenSpec {
            normalize: true,
            ..GenSpec::new(10_000, 256, 3)
        };
        generate_random_walk(&spec, &p).unwrap();
        let data = read_all(&p, 256).unwrap();
        for s in data.chunks_exact(256) {
            let mean = s.iter().map(|&v| v as f64).sum::<f64>() / 256.0;
            let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 256.0;
            assert!(mean.abs() <= 1e-5, "{mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn steps_are_standard_normal() {
        let s = random_walk(9, 0, 100_000, false);
        let steps: Vec<f64> = std::iter::once(s[0] as f64)
            .chain(s.windows(2).map(|w| w[1] as f64 - w[0] as f64))
            .collect();
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        let var = steps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / steps.len() as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn queries_are_not_dataset_members() {
        let dir = tempfile::tempdir().unwrap();
        let (d, q) = (dir.path().join("d"), dir.path().join("q"));
        let spec = GenSpec::new(2000, 64, 5);
        generate_random_walk(&spec, &d).unwrap();
        assert_eq!(
            generate_queries(
                &GenSpec {
                    count: DEFAULT_QUERY_COUNT,
                    ..spec
                },
                &q
            )
            .unwrap(),
            100
        );
        let data = read_all(&d, 64).unwrap();
        let queries = read_all(&q, 64).unwrap();
        assert_eq!(queries.len(), 100 * 64);
        assert_eq!(queries.chunks_exact(64).next().unwrap(), &query_set(&GenSpec { count: 1, ..spec })[0][..]);
        for qs in queries.chunks_exact(64) {
            assert!(data.chunks_exact(64).all(|s| s != qs));
        }
    }
}
