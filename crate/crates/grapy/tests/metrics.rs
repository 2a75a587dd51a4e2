//! Hand-enumerated confusion matrices.

use grapy::labels::LabelMap;
use grapy::metrics::{ConfusionMatrix, Scores};

fn matrix(k: usize, pred: &[usize], gt: &[usize]) -> ConfusionMatrix {
    let n = pred.len();
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(
        &LabelMap::new(1, n, k, pred.to_vec()).unwrap(),
        &LabelMap::new(1, n, k, gt.to_vec()).unwrap(),
    )
    .unwrap();
    cm
}

#[test]
fn three_pixel_two_class_case() {
    let cm = matrix(2, &[0, 1, 1], &[0, 0, 1]);
    assert_eq!(cm, ConfusionMatrix::from_rows(&[vec![1, 1], vec![0, 1]]).unwrap());
    assert_eq!(cm.iou(0), Some(0.5));
    assert_eq!(cm.iou(1), Some(0.5));
    assert_eq!(cm.miou().unwrap(), 0.5);
    assert_eq!(cm.recall(0), Some(0.5));
    assert_eq!(cm.recall(1), Some(1.0));
    assert_eq!(cm.mean_accuracy().unwrap(), 0.75);
    assert_eq!(cm.mean_accuracy_from(1).unwrap(), 1.0);
}

#[test]
fn perfect_prediction_scores_one() {
    let labels = [0, 1, 2, 3, 3, 2, 1, 0, 0];
    let cm = matrix(4, &labels, &labels);
    assert_eq!(Scores::of(&cm).unwrap(), Scores { miou: 1.0, mean_accuracy: 1.0 });
}

#[test]
fn absent_classes_are_left_out_of_the_means() {
    // class 2 appears nowhere, class 1 only in the prediction
    let cm = matrix(3, &[0, 0, 1, 0], &[0, 0, 0, 0]);
    assert_eq!(cm.iou(2), None);
    assert_eq!(cm.iou(1), Some(0.0));
    assert_eq!(cm.iou(0), Some(0.75));
    assert_eq!(cm.miou().unwrap(), 0.375);
    assert_eq!(cm.recall(1), None);
    assert_eq!(cm.mean_accuracy().unwrap(), 0.75);
}

#[test]
fn four_class_case() {
    // rows gt, cols pred
    let cm = ConfusionMatrix::from_rows(&[
        vec![5, 1, 0, 0],
        vec![2, 3, 1, 0],
        vec![0, 0, 4, 0],
        vec![0, 0, 0, 0],
    ])
    .unwrap();
    assert_eq!(cm.total(), 16);
    let ious = [5.0 / 8.0, 3.0 / 7.0, 4.0 / 5.0];
    for (k, v) in ious.iter().enumerate() {
        assert_eq!(cm.iou(k), Some(*v));
    }
    assert_eq!(cm.iou(3), None);
    assert_eq!(cm.miou().unwrap(), (ious[0] + ious[1] + ious[2]) / 3.0);
    assert_eq!(cm.mean_accuracy().unwrap(), (5.0 / 6.0 + 0.5 + 1.0) / 3.0);
}

#[test]
fn coarse_levels_of_a_perfect_predictor_are_perfect() {
    use grapy::taxonomy::{Level, Taxonomy};
    let tax = Taxonomy::builtin("B").unwrap();
    let fine = LabelMap::new(1, 12, 12, (0..12).collect()).unwrap();
    for level in [Level::One, Level::Two] {
        let coarse = tax.coarsen(&fine, level).unwrap();
        let mut cm = ConfusionMatrix::new(tax.num_classes(level));
        cm.accumulate(&coarse, &coarse).unwrap();
        assert_eq!(Scores::of(&cm).unwrap(), Scores { miou: 1.0, mean_accuracy: 1.0 });
    }
}

#[test]
fn mismatched_sizes_are_rejected() {
    let mut cm = ConfusionMatrix::new(2);
    let a = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
    let b = LabelMap::new(2, 1, 2, vec![0, 1]).unwrap();
    assert!(cm.accumulate(&a, &b).is_err());
}
