//! Evaluation metrics over hard pixel counts. Tree cover is the positive
//! class; mean IoU averages the tree and non-tree classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const METRIC_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Order-independent accumulation across tiles or samples.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Threshold probabilities at 0.5 into a binary map.
pub fn threshold(prob: &Tensor) -> Tensor {
    let data = prob
        .data()
        .iter()
        .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_parts(prob.shape().to_vec(), data)
}

/// Exact integer counts; both inputs must be strictly binary.
pub fn confusion(pred: &Tensor, label: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != label.shape() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: pred.shape().to_vec(),
            rhs: label.shape().to_vec(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(label.data()) {
        if (p != 0.0 && p != 1.0) || (y != 0.0 && y != 1.0) {
            return Err(Error::invalid("confusion expects strictly binary inputs"));
        }
        match (p == 1.0, y == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// mIoU over {tree, non-tree}; IoU, precision, recall, F1 for the tree
/// class. Denominators are epsilon-guarded.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let iou_tree = tp / (tp + fp + fn_ + METRIC_EPS);
    // For the non-tree class the true positives are the true negatives and
    // the error roles swap.
    let iou_bg = tn / (tn + fn_ + fp + METRIC_EPS);
    let precision = tp / (tp + fp + METRIC_EPS);
    let recall = tp / (tp + fn_ + METRIC_EPS);
    let f1 = 2.0 * precision * recall / (precision + recall + METRIC_EPS);
    Metrics {
        miou: 0.5 * (iou_tree + iou_bg),
        iou: iou_tree,
        precision,
        recall,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::StreamKey;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let c = ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 20 };
        let m = metrics(&c);
        assert!((m.miou - 1.0).abs() < 1e-9);
        assert!((m.iou - 1.0).abs() < 1e-9);
        assert!((m.f1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn analytic_confusion_table() {
        // TP=3, FP=1, FN=1: IoU 0.6, precision 0.75, recall 0.75, F1 0.75.
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 5 };
        let m = metrics(&c);
        assert!((m.iou - 0.6).abs() < 1e-9);
        assert!((m.precision - 0.75).abs() < 1e-9);
        assert!((m.recall - 0.75).abs() < 1e-9);
        assert!((m.f1 - 0.75).abs() < 1e-9);
    }

    #[test]
    fn confusion_counts_basics() {
        let y = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = confusion(&y, &y).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let ones = Tensor::filled(&[1, 4, 4], 1.0);
        let zeros = Tensor::zeros(&[1, 4, 4]);
        let c = confusion(&ones, &zeros).unwrap();
        assert_eq!(c.fp, 16);
        assert!(confusion(&ones, &Tensor::zeros(&[1, 2, 2])).is_err());
        let frac = Tensor::filled(&[1, 2, 2], 0.5);
        assert!(confusion(&frac, &Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn confusion_matches_pixel_loop_oracle() {
        let key = StreamKey::new(120).with_str("conf");
        let to_bin = |v: &[f32]| -> Vec<f32> { v.iter().map(|&x| if x > 0.5 { 1.0 } else { 0.0 }).collect() };
        let p = to_bin(&key.with(0).uniform_vec_f32(1024, 0.0, 1.0));
        let y = to_bin(&key.with(1).uniform_vec_f32(1024, 0.0, 1.0));
        let c = confusion(
            &Tensor::new(vec![1, 32, 32], p.clone()).unwrap(),
            &Tensor::new(vec![1, 32, 32], y.clone()).unwrap(),
        )
        .unwrap();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (pv, yv) in p.iter().zip(&y) {
            match (*pv == 1.0, *yv == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
        assert_eq!(c.total(), 1024);
    }

    #[test]
    fn f1_equals_harmonic_mean_oracle() {
        let key = StreamKey::new(121).with_str("f1");
        for s in 0..50u64 {
            let c = ConfusionCounts {
                tp: key.with(s).u64_at(0) % 1000 + 1,
                fp: key.with(s).u64_at(1) % 1000,
                fn_: key.with(s).u64_at(2) % 1000,
                tn: key.with(s).u64_at(3) % 1000,
            };
            let m = metrics(&c);
            let want = oracle::f1_harmonic(m.precision, m.recall);
            assert!((m.f1 - want).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn metrics_are_scale_invariant(tp in 1u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 1u64..500, k in 2u64..9) {
            let c1 = ConfusionCounts { tp, fp, fn_, tn };
            let c2 = ConfusionCounts { tp: tp * k, fp: fp * k, fn_: fn_ * k, tn: tn * k };
            let (m1, m2) = (metrics(&c1), metrics(&c2));
            prop_assert!((m1.miou - m2.miou).abs() < 1e-8);
            prop_assert!((m1.iou - m2.iou).abs() < 1e-8);
            prop_assert!((m1.f1 - m2.f1).abs() < 1e-8);
        }
    }

    #[test]
    fn threshold_splits_at_half() {
        let p = Tensor::new(vec![4], vec![0.2, 0.5, 0.7, 0.49]).unwrap();
        assert_eq!(threshold(&p).data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
