use proptest::prelude::*;

use step_core::cost::partition_stats;
use step_core::grid::{make_grid, validate_partition, Superpatch, SUPERPATCH_SIZES};
use step_core::merge::{merge_dcts, HomogeneityScorer, MergeThresholds};
use step_core::pixel_io::{generate_scene, Image, SceneSpec, ShapeKind};

fn scene(size: usize, shapes: usize, noise: f64, seed: u64) -> Image {
    generate_scene(&SceneSpec {
        size,
        num_classes: 6,
        num_shapes: shapes,
        shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Disk],
        noise_sigma: noise,
        seed,
    })
    .unwrap()
    .0
}

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merged_partitions_are_valid(
        size in 16usize..200,
        shapes in 0usize..6,
        noise in 0.0f64..10.0,
        seed in any::<u64>(),
        t in (unit(), unit(), unit(), unit()),
        k in 0.5f64..30.0,
    ) {
        let grid = make_grid(&scene(size, shapes, noise, seed)).unwrap();
        let thresholds = MergeThresholds::new(t.0, t.1, t.2, t.3).unwrap();
        let p = merge_dcts(&grid, &thresholds, &HomogeneityScorer::new(k).unwrap()).unwrap();
        prop_assert!(validate_partition(&p).is_ok());
        prop_assert_eq!(p.cells(), grid.cells());
        let area: usize = p.patches().iter().map(Superpatch::area).sum();
        prop_assert_eq!(area, grid.cells());
    }

    #[test]
    fn lowering_a_threshold_never_adds_tokens(seed in any::<u64>(), t in unit(), drop in unit()) {
        let grid = make_grid(&scene(128, 3, 2.0, seed)).unwrap();
        let scorer = HomogeneityScorer::default();
        let hi = MergeThresholds::new(t, 0.9, 0.9, 0.9).unwrap();
        let lo = MergeThresholds::new(t * drop, 0.9, 0.9, 0.9).unwrap();
        let n_hi = merge_dcts(&grid, &hi, &scorer).unwrap().len();
        let n_lo = merge_dcts(&grid, &lo, &scorer).unwrap().len();
        prop_assert!(n_lo <= n_hi);
    }
}

#[test]
fn constant_image_merges_to_largest_size() {
    let image = Image::filled(512, 512, &[90, 140, 200]).unwrap();
    let grid = make_grid(&image).unwrap();
    for t in [MergeThresholds::T4999, MergeThresholds::T6899] {
        let p = merge_dcts(&grid, &t, &HomogeneityScorer::default()).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.patches().iter().all(|s| s.size == 16));
    }
}

#[test]
fn unit_thresholds_keep_noisy_patches() {
    let grid = make_grid(&scene(64, 0, 1.0, 3)).unwrap();
    let never = MergeThresholds::new(1.0, 1.0, 1.0, 1.0).unwrap();
    let p = merge_dcts(&grid, &never, &HomogeneityScorer::default()).unwrap();
    assert_eq!(p.len(), 16);
    // A flat image scores exactly 1 and still merges at threshold 1.
    let flat = make_grid(&Image::filled(64, 64, &[0, 0, 0]).unwrap()).unwrap();
    assert_eq!(
        merge_dcts(&flat, &never, &HomogeneityScorer::default())
            .unwrap()
            .len(),
        1
    );
    assert!(p.patches().iter().all(|s| s.size == 1));
}

#[test]
fn partition_stats_match_recount() {
    let scorer = HomogeneityScorer::default();
    let partitions: Vec<_> = (0..12)
        .map(|seed| {
            let grid = make_grid(&scene(256, seed as usize % 5, 1.0, seed)).unwrap();
            merge_dcts(&grid, &MergeThresholds::T4999, &scorer).unwrap()
        })
        .collect();
    let stats = partition_stats(&partitions).unwrap();
    assert_eq!(stats.images, 12);
    for (i, &size) in SUPERPATCH_SIZES.iter().enumerate() {
        let counts: Vec<usize> = partitions
            .iter()
            .map(|p| p.patches().iter().filter(|s| s.size == size).count())
            .collect();
        let s = &stats.by_size[i];
        assert_eq!(s.size, size);
        assert_eq!(s.count.min, *counts.iter().min().unwrap());
        assert_eq!(s.count.max, *counts.iter().max().unwrap());
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        assert!((s.count.mean - mean).abs() < 1e-12);
    }
    let reduction: f64 = partitions
        .iter()
        .map(|p| 256.0 / p.patches().len() as f64)
        .sum::<f64>()
        / 12.0;
    assert!((stats.mean_reduction_factor - reduction).abs() < 1e-12);
}
