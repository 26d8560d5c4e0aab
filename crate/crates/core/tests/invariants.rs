//! Index invariants over randomly shaped inputs and configurations.

use std::collections::HashMap;
use std::path::Path;

use paris_core::baseline::brute_force_nn;
use paris_core::datagen::{generate_random_walk, query_set, GenSpec};
use paris_core::index::persist_index;
use paris_core::raw::read_all;
use paris_core::verify::verify_index;
use paris_core::{Builder, Error, IndexConfig, SaxWord, SearchOptions, Searcher, Variant};
use proptest::prelude::*;

const N: usize = 32;

type Leaves = HashMap<SaxWord, Vec<u64>>;

/// Leaf contents of a verified build, or `None` when some leaf overflowed
/// with every segment at full cardinality.
fn leaves_of(variant: Variant, config: &IndexConfig, raw: &Path, out: &Path) -> Option<Leaves> {
    let mut index = match Builder::new(variant, config.clone()).build(raw, out) {
        Ok((index, _)) => index,
        Err(Error::IndexFull { .. }) => return None,
        Err(e) => panic!("{e}"),
    };
    let report = verify_index(&index, None, 50).unwrap();
    assert!(report.passed(), "{report}");
    persist_index(&mut index).unwrap();
    Some(index.leaf_positions().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Completeness, containment, occupancy and alignment hold for any
    /// configuration, and the leaves do not depend on variant or workers.
    #[test]
    fn builds_are_valid_and_deterministic(
        count in 0u64..1500,
        seed in any::<u64>(),
        segments in prop::sample::select(vec![1usize, 2, 4, 8, 16]),
        capacity in 2usize..60,
        part in 1usize..200,
        loaders in 1usize..7,
        builders in 1usize..7,
        budget in 100u64..20_000,
        normalize in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        generate_random_walk(&GenSpec::new(count, N, seed), &raw).unwrap();
        let config = IndexConfig {
            series_len: N,
            segments,
            leaf_capacity: capacity,
            buffer_part_bytes: part * N * 4,
            n_bulk_workers: loaders,
            n_construction_workers: builders,
            memory_budget_bytes: budget,
            normalize,
            ..IndexConfig::default()
        };
        let reference = IndexConfig {
            n_bulk_workers: 1,
            n_construction_workers: 1,
            buffer_part_bytes: 1 << 20,
            memory_budget_bytes: 1 << 30,
            ..config.clone()
        };
        let a = leaves_of(Variant::Paris, &config, &raw, &dir.path().join("a"));
        let b = leaves_of(Variant::ParisPlus, &config, &raw, &dir.path().join("b"));
        let c = leaves_of(Variant::ParisPlus, &reference, &raw, &dir.path().join("c"));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &c);
    }

    /// Exact engines agree with the brute-force oracle and never report a
    /// distance below it; the approximate answer is never better.
    #[test]
    fn exact_engines_match_oracle(
        count in 1u64..800,
        seed in any::<u64>(),
        capacity in 2usize..40,
        lbc in 1usize..5,
        rdc in 1usize..9,
        nb in 1usize..30,
        k in 1usize..6,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("d.bin");
        generate_random_walk(&GenSpec::new(count, N, seed), &raw).unwrap();
        let config = IndexConfig {
            series_len: N,
            segments: 8,
            leaf_capacity: capacity,
            buffer_part_bytes: 4096,
            ..IndexConfig::default()
        };
        let (index, _) = Builder::new(Variant::ParisPlus, config).build(&raw, dir.path().join("i")).unwrap();
        let data = read_all(&raw, N).unwrap();
        let s = Searcher::open(&index).unwrap().options(SearchOptions { lbc_workers: lbc, rdc_workers: rdc, nb_workers: nb });
        let k = k.min(count as usize);
        for q in query_set(&GenSpec::new(3, N, seed ^ 1)) {
            let want = brute_force_nn(&data, N, &q, k, true).unwrap();
            let tol = |d: f32| 1e-4 * d.max(1.0);
            let (e, _) = s.exact(&q).unwrap();
            let (nbv, _) = s.exact_nb(&q).unwrap();
            let (a, _) = s.approximate(&q).unwrap();
            prop_assert!((e.distance - want[0].distance).abs() <= tol(want[0].distance));
            prop_assert!((nbv.distance - want[0].distance).abs() <= tol(want[0].distance));
            prop_assert!(a.distance + tol(a.distance) >= e.distance);
            let (got, _) = s.knn(&q, k).unwrap();
            prop_assert_eq!(got.len(), k);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g.distance - w.distance).abs() <= tol(w.distance));
            }
        }
    }
}
