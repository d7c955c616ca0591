use proptest::prelude::*;

use step_core::cost::{pipeline_cost, sweep_head_placements, HaltSchedule, ScheduleModel};
use step_core::encoder::{ArchConfig, StagePlan};
use step_core::metrics::ConfusionMatrix;
use step_core::pixel_io::LabelMap;

fn maps(c: u8, len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (
        proptest::collection::vec(0..c, len),
        proptest::collection::vec(0..c, len),
    )
}

fn cm_of(pred: &[u8], gt: &[u8], c: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(c).unwrap();
    let w = pred.len();
    cm.accumulate(
        &LabelMap::new(w, 1, pred.to_vec()).unwrap(),
        &LabelMap::new(w, 1, gt.to_vec()).unwrap(),
    )
    .unwrap();
    cm
}

proptest! {
    #[test]
    fn miou_invariant_under_relabeling((pred, gt) in maps(6, 64), shift in 1u8..6) {
        let perm = |v: &[u8]| v.iter().map(|&l| (l + shift) % 6).collect::<Vec<_>>();
        let a = cm_of(&pred, &gt, 6).miou().unwrap();
        let b = cm_of(&perm(&pred), &perm(&gt), 6).miou().unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn accumulation_order_is_irrelevant((pred, gt) in maps(5, 96), split in 1usize..95) {
        let whole = cm_of(&pred, &gt, 5);
        let mut parts = cm_of(&pred[split..], &gt[split..], 5);
        parts.merge(&cm_of(&pred[..split], &gt[..split], 5)).unwrap();
        prop_assert_eq!(whole.miou().unwrap(), parts.miou().unwrap());
        prop_assert_eq!(whole.total(), 96);
    }

    #[test]
    fn perfect_prediction_scores_one((gt, _) in maps(4, 50)) {
        prop_assert_eq!(cm_of(&gt, &gt, 4).miou().unwrap(), 1.0);
        prop_assert_eq!(cm_of(&gt, &gt, 4).pixel_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn fewer_survivors_never_cost_more(a in 0.05f64..1.0, b in 0.05f64..1.0, n0 in 16usize..1024) {
        let arch = ArchConfig::vit_base(20);
        let plan = StagePlan::new(vec![4, 8], 12).unwrap();
        let (hi, lo) = (a.max(b), a.min(b));
        let keep = pipeline_cost(n0, 1024, &arch, &plan, &HaltSchedule::new(vec![hi, hi]).unwrap()).unwrap();
        let prune = pipeline_cost(n0, 1024, &arch, &plan, &HaltSchedule::new(vec![hi, lo]).unwrap()).unwrap();
        prop_assert!(prune.total_flops <= keep.total_flops);
        prop_assert!(keep.total_flops <= keep.baseline_total_flops + keep.aux_head_flops.iter().sum::<u64>());
    }
}

#[test]
fn worked_miou_example() {
    let gt: Vec<u8> = [0u8; 50].into_iter().chain([1u8; 50]).collect();
    let pred: Vec<u8> = [0u8; 75].into_iter().chain([1u8; 25]).collect();
    let cm = cm_of(&pred, &gt, 2);
    assert_eq!(cm.per_class_iou(), vec![Some(50.0 / 75.0), Some(0.5)]);
    assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn absent_classes_are_skipped() {
    let cm = cm_of(&[0, 0, 2, 2], &[0, 0, 2, 0], 4);
    assert_eq!(
        cm.per_class_iou(),
        vec![Some(2.0 / 3.0), None, Some(0.5), None]
    );
}

#[test]
fn sweep_is_sorted_and_covers_pairs() {
    let arch = ArchConfig::vit_large(150);
    let rows = sweep_head_placements(&arch, 1024, &ScheduleModel::default()).unwrap();
    assert_eq!(rows.len(), 1 + 23 + 23 * 22 / 2);
    assert!(rows
        .windows(2)
        .all(|w| w[0].total_flops <= w[1].total_flops));
}
