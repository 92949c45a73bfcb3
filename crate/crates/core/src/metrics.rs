//! Confusion-matrix accumulation and segmentation metrics.
//!
//! Rows of the matrix are ground-truth classes, columns predicted classes.
//! For class `k`: `TP = counts[k][k]`, `FP` = column sum minus `TP`,
//! `FN` = row sum minus `TP`.
//!
//! Overall accuracy is `trace / total`. Classes absent from both ground truth
//! and predictions (`TP + FP + FN = 0`) are left out of mIoU and mean F1.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    total: u64,
}

/// Precision, recall, F1 and IoU of one class; `None` for absent classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            total: 0,
        }
    }

    /// Builds a matrix from explicit rows (ground truth × prediction).
    pub fn from_counts(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Data("confusion matrix must be square".into()));
        }
        let counts: Vec<u64> = rows.concat();
        let total = counts.iter().sum();
        Ok(Self {
            num_classes: k,
            counts,
            total,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    /// Counts every pixel whose label and prediction both differ from `ignore`.
    /// The matrix is untouched when any value is out of range.
    pub fn update(&mut self, predictions: &[u8], labels: &[u8], ignore: Option<u8>) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::dim("confusion_update", &[predictions.len()], &[labels.len()]));
        }
        let k = self.num_classes;
        let counted = |p: u8, l: u8| Some(l) != ignore && Some(p) != ignore;
        for (i, (&p, &l)) in predictions.iter().zip(labels).enumerate() {
            if counted(p, l) && (p as usize >= k || l as usize >= k) {
                return Err(Error::Data(format!(
                    "class outside [0, {k}) at pixel {i}: label {l}, prediction {p}"
                )));
            }
        }
        for (&p, &l) in predictions.iter().zip(labels) {
            if counted(p, l) {
                self.counts[l as usize * k + p as usize] += 1;
                self.total += 1;
            }
        }
        Ok(())
    }

    /// Element-wise sum; equals accumulating both inputs sequentially.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::dim("confusion merge", &[self.num_classes], &[other.num_classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.total += other.total;
        Ok(())
    }

    fn tallies(&self, k: usize) -> (u64, u64, u64) {
        let n = self.num_classes;
        let tp = self.count(k, k);
        let row: u64 = self.counts[k * n..(k + 1) * n].iter().sum();
        let col: u64 = (0..n).map(|t| self.count(t, k)).sum();
        (tp, col - tp, row - tp)
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::UndefinedMetric("confusion matrix is empty"));
        }
        Ok(())
    }

    pub fn class_scores(&self, k: usize) -> Option<ClassScores> {
        let (tp, fp, fn_) = self.tallies(k);
        if tp + fp + fn_ == 0 {
            return None;
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Some(ClassScores {
            precision,
            recall,
            f1,
            iou: ratio(tp, tp + fp + fn_),
        })
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let trace: u64 = (0..self.num_classes).map(|k| self.count(k, k)).sum();
        Ok(trace as f64 / self.total as f64)
    }

    pub fn mean_iou(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let ious: Vec<f64> = (0..self.num_classes)
            .filter_map(|k| self.class_scores(k).map(|s| s.iou))
            .collect();
        if ious.is_empty() {
            return Err(Error::UndefinedMetric("every class is empty"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn f1_scores(&self) -> Result<F1Report> {
        self.ensure_nonempty()?;
        let per_class: Vec<Option<f64>> = (0..self.num_classes)
            .map(|k| self.class_scores(k).map(|s| s.f1))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(F1Report { per_class, mean })
    }

    /// Report with one row per class and three summary rows:
    ///
    /// ```text
    /// row,precision,recall,f1,iou,value
    /// class_0,...
    /// oa,,,,,<OA>
    /// mean_f1,,,,,<mean F1>
    /// miou,,,,,<mIoU>
    /// ```
    ///
    /// Absent classes leave their score columns empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("row,precision,recall,f1,iou,value\n");
        for k in 0..self.num_classes {
            match self.class_scores(k) {
                Some(s) => writeln!(out, "class_{k},{:.10},{:.10},{:.10},{:.10},", s.precision, s.recall, s.f1, s.iou),
                None => writeln!(out, "class_{k},,,,,"),
            }
            .expect("write to String");
        }
        writeln!(out, "oa,,,,,{:.10}", self.overall_accuracy()?).expect("write to String");
        writeln!(out, "mean_f1,,,,,{:.10}", self.f1_scores()?.mean).expect("write to String");
        writeln!(out, "miou,,,,,{:.10}", self.mean_iou()?).expect("write to String");
        Ok(out)
    }
}
