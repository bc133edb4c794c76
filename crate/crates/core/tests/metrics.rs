mod common;

use canalseg::metrics::{confusion, evaluate_case, evaluate_dataset, report, ConfusionCounts};
use canalseg::volgrid::Grid;
use common::*;

#[test]
fn identities_hold_over_random_counts() {
    let rep = metric_identity_suite(100_000, 4);
    assert_eq!(rep.f1_not_dice, 0);
    assert!(rep.max_iou_gap <= 1e-12, "{rep:?}");
}

#[test]
fn hand_case() {
    let (pred, gt) = hand_confusion_masks();
    let c = confusion(&pred, &gt).unwrap();
    assert_eq!(c, ConfusionCounts { tp: 6, fp: 2, fn_: 2, tn: 54 });
    let r = report(&c);
    assert_eq!(r.precision, Some(0.75));
    assert_eq!(r.recall, Some(0.75));
    assert_eq!(r.f1, Some(0.75));
    assert_eq!(r.dice, Some(0.75));
    assert_eq!(r.iou, Some(0.6));
    assert_eq!(r.specificity, Some(54.0 / 56.0));
}

#[test]
fn all_ones_against_empty() {
    let p = Grid::filled([2; 3], [1.0; 3], 1u8);
    let g = Grid::filled([2; 3], [1.0; 3], 0u8);
    assert_eq!(confusion(&p, &g).unwrap(), ConfusionCounts { tp: 0, fp: 8, fn_: 0, tn: 0 });
}

#[test]
fn overall_pools_side_counts() {
    // Left perfect with 8 voxels, right predicts nothing against 5 voxels.
    let (mut gl, mut gr) = (Grid::filled([6; 3], [1.0; 3], 0u8), Grid::filled([6; 3], [1.0; 3], 0u8));
    gl.data_mut()[..8].iter_mut().for_each(|v| *v = 1);
    gr.data_mut()[100..105].iter_mut().for_each(|v| *v = 1);
    let empty = Grid::filled([6; 3], [1.0; 3], 0u8);
    let case = evaluate_case(&gl, &empty, &gl, &gr).unwrap();
    assert_eq!(case.left.dice, Some(1.0));
    assert_eq!(case.overall.dice, Some(16.0 / 21.0));
    let ds = evaluate_dataset(&[case.clone(), case]).unwrap();
    assert_eq!(ds.per_side.dice.mean, Some(0.5));
    assert_eq!(ds.per_side.precision.excluded, 2);
}

#[test]
fn converting_a_false_negative_never_hurts() {
    let mut rng = rng(5);
    for _ in 0..10_000 {
        use rand::Rng;
        let c = ConfusionCounts { tp: rng.random_range(0..50), fp: rng.random_range(0..50), fn_: rng.random_range(1..50), tn: 10 };
        let better = ConfusionCounts { tp: c.tp + 1, fn_: c.fn_ - 1, ..c };
        let (a, b) = (report(&c), report(&better));
        assert!(b.recall >= a.recall && b.dice >= a.dice && b.iou >= a.iou);
    }
}
