use a2fpn::metrics::ConfusionMatrix;
use a2fpn::Error;
use proptest::prelude::*;

const IGNORE: u8 = 255;

/// Per-class scores straight from the pixel lists, no matrix involved.
fn oracle(preds: &[u8], labels: &[u8], k: u8) -> (f64, f64, f64) {
    let pairs: Vec<(u8, u8)> = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p != IGNORE && **l != IGNORE)
        .map(|(p, l)| (*p, *l))
        .collect();
    let correct = pairs.iter().filter(|(p, l)| p == l).count();
    let oa = correct as f64 / pairs.len() as f64;
    let (mut ious, mut f1s) = (Vec::new(), Vec::new());
    for c in 0..k {
        let tp = pairs.iter().filter(|&&(p, l)| p == c && l == c).count() as f64;
        let fp = pairs.iter().filter(|&&(p, l)| p == c && l != c).count() as f64;
        let fn_ = pairs.iter().filter(|&&(p, l)| p != c && l == c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        ious.push(tp / (tp + fp + fn_));
        f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (oa, mean(&ious), mean(&f1s))
}

fn pixels(k: u8) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..300).prop_flat_map(move |n| {
        let value = prop_oneof![9 => 0..k, 1 => Just(IGNORE)];
        (proptest::collection::vec(value.clone(), n), proptest::collection::vec(value, n))
    })
}

fn matrix(preds: &[u8], labels: &[u8], k: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(k);
    cm.update(preds, labels, Some(IGNORE)).unwrap();
    cm
}

proptest! {
    #[test]
    fn matches_pixel_counting_oracle((preds, labels) in pixels(5)) {
        let cm = matrix(&preds, &labels, 5);
        prop_assume!(cm.total() > 0);
        let (oa, miou, f1) = oracle(&preds, &labels, 5);
        prop_assert!((cm.overall_accuracy().unwrap() - oa).abs() <= 1e-12);
        prop_assert!((cm.mean_iou().unwrap() - miou).abs() <= 1e-12);
        prop_assert!((cm.f1_scores().unwrap().mean - f1).abs() <= 1e-12);
    }

    #[test]
    fn scores_lie_in_unit_interval((preds, labels) in pixels(4)) {
        let cm = matrix(&preds, &labels, 4);
        prop_assume!(cm.total() > 0);
        for v in [cm.overall_accuracy().unwrap(), cm.mean_iou().unwrap(), cm.f1_scores().unwrap().mean] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for k in 0..4 {
            if let Some(s) = cm.class_scores(k) {
                prop_assert!(s.iou <= s.f1 + 1e-15);
            }
        }
    }

    #[test]
    fn merge_equals_one_pass((preds, labels) in pixels(3), cut in 0usize..300) {
        let cut = cut.min(preds.len());
        let mut split = matrix(&preds[..cut], &labels[..cut], 3);
        split.merge(&matrix(&preds[cut..], &labels[cut..], 3)).unwrap();
        prop_assert_eq!(split, matrix(&preds, &labels, 3));
    }

    #[test]
    fn pixel_order_is_irrelevant((preds, labels) in pixels(4), shift in 0usize..300) {
        let n = preds.len();
        let rot = |v: &[u8]| (0..n).map(|i| v[(i + shift) % n]).collect::<Vec<_>>();
        prop_assert_eq!(matrix(&rot(&preds), &rot(&labels), 4), matrix(&preds, &labels, 4));
    }

    #[test]
    fn truth_as_prediction_is_perfect(labels in proptest::collection::vec(0u8..6, 1..200)) {
        let cm = matrix(&labels, &labels, 6);
        prop_assert_eq!(cm.overall_accuracy().unwrap(), 1.0);
        prop_assert_eq!(cm.mean_iou().unwrap(), 1.0);
        prop_assert_eq!(cm.f1_scores().unwrap().mean, 1.0);
    }

    #[test]
    fn total_counts_non_ignored_pixels((preds, labels) in pixels(4)) {
        let counted = preds.iter().zip(&labels).filter(|(p, l)| **p != IGNORE && **l != IGNORE).count();
        prop_assert_eq!(matrix(&preds, &labels, 4).total(), counted as u64);
    }
}

#[test]
fn length_mismatch_is_rejected() {
    let mut cm = ConfusionMatrix::new(2);
    assert!(matches!(cm.update(&[0, 1], &[0], None), Err(Error::Dimension { .. })));
}

#[test]
fn merge_rejects_other_class_counts() {
    let mut cm = ConfusionMatrix::new(2);
    assert!(cm.merge(&ConfusionMatrix::new(3)).is_err());
}

#[test]
fn csv_has_one_row_per_class_and_summary() {
    let cm = matrix(&[0, 1, 2, 2], &[0, 1, 1, 2], 4);
    let csv = cm.to_csv().unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 4 + 3);
    assert_eq!(rows[4], "class_3,,,,,");
    assert_eq!(rows[5], "oa,,,,,0.7500000000");
}
