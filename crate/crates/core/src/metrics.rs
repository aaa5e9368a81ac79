//! Segmentation metrics: confusion matrix, frequency-weighted accuracy and
//! IoU, and dwelling-vs-background binary scores.
//!
//! "Weighted" means each class is weighted by its share of ground-truth
//! pixels. The headline numbers include background; [`MetricsReport`] also
//! carries the variant that excludes it.

use std::fmt::{self, Write as _};
use std::ops::AddAssign;

use thiserror::Error;

use crate::geodata::NUM_CLASSES;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("mask shape mismatch: pred {pred}, truth {truth}, valid {valid} pixels")]
    Shape { pred: usize, truth: usize, valid: usize },
    #[error("class id {0} out of range")]
    Class(u8),
    #[error("no valid pixels")]
    NoValidPixels,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Pixel counts, `counts[truth][pred]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub valid_total: u64,
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        for (row, other) in self.counts.iter_mut().zip(rhs.counts) {
            for (c, o) in row.iter_mut().zip(other) {
                *c += o;
            }
        }
        self.valid_total += rhs.valid_total;
    }
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let valid_total = counts.iter().flatten().sum();
        ConfusionMatrix { counts, valid_total }
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn recall(&self, class: usize) -> Option<f64> {
        let n = self.row_sum(class);
        (n > 0).then(|| self.counts[class][class] as f64 / n as f64)
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.counts[class][class];
        let union = self.row_sum(class) + self.col_sum(class) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

fn check_shapes(pred: &[u8], truth: &[u8], valid: &[bool]) -> Result<()> {
    if pred.len() != truth.len() || valid.len() != truth.len() {
        return Err(MetricsError::Shape { pred: pred.len(), truth: truth.len(), valid: valid.len() });
    }
    Ok(())
}

/// Confusion matrix over valid pixels of equally sized row-major masks.
pub fn confusion(pred: &[u8], truth: &[u8], valid: &[bool]) -> Result<ConfusionMatrix> {
    check_shapes(pred, truth, valid)?;
    let mut cm = ConfusionMatrix::default();
    for ((&p, &t), &v) in pred.iter().zip(truth).zip(valid) {
        if !v {
            continue;
        }
        for c in [p, t] {
            if c as usize >= NUM_CLASSES {
                return Err(MetricsError::Class(c));
            }
        }
        cm.counts[t as usize][p as usize] += 1;
        cm.valid_total += 1;
    }
    if cm.valid_total == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(cm)
}

fn weighted(cm: &ConfusionMatrix, classes: impl Iterator<Item = usize> + Clone, per_class: impl Fn(usize) -> Option<f64>) -> f64 {
    let total: u64 = classes.clone().map(|c| cm.row_sum(c)).sum();
    if total == 0 {
        return 0.0;
    }
    let weighted_sum: f64 = classes
        .filter_map(|c| {
            let n = cm.row_sum(c);
            per_class(c).filter(|_| n > 0).map(|m| n as f64 * m)
        })
        .sum();
    weighted_sum / total as f64
}

/// `sum_c (n_c / N) * recall_c` over classes present in the ground truth,
/// evaluated as `(sum_c n_c * recall_c) / N`.
pub fn weighted_accuracy(cm: &ConfusionMatrix) -> f64 {
    weighted(cm, 0..NUM_CLASSES, |c| cm.recall(c))
}

/// `sum_c (n_c / N) * IoU_c`; classes absent from the ground truth have zero
/// weight, so only the empty-union case needs excluding.
pub fn weighted_iou(cm: &ConfusionMatrix) -> f64 {
    weighted(cm, 0..NUM_CLASSES, |c| cm.iou(c))
}

/// Weighted accuracy over the dwelling classes only (background excluded
/// from both the weights and the sum); `None` without dwelling pixels.
pub fn weighted_accuracy_no_background(cm: &ConfusionMatrix) -> Option<f64> {
    (1..NUM_CLASSES).any(|c| cm.row_sum(c) > 0).then(|| weighted(cm, 1..NUM_CLASSES, |c| cm.recall(c)))
}

pub fn weighted_iou_no_background(cm: &ConfusionMatrix) -> Option<f64> {
    (1..NUM_CLASSES).any(|c| cm.row_sum(c) > 0).then(|| weighted(cm, 1..NUM_CLASSES, |c| cm.iou(c)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Dwelling (classes 1..7) vs background. Precision and recall are 1 when
/// their denominator is 0 and the numerator's complement is also empty
/// (nothing predicted and nothing present), else 0.
pub fn binary_metrics(pred: &[u8], truth: &[u8], valid: &[bool]) -> Result<BinaryMetrics> {
    check_shapes(pred, truth, valid)?;
    let (mut tp, mut fp, mut tn, mut fne) = (0u64, 0u64, 0u64, 0u64);
    for ((&p, &t), &v) in pred.iter().zip(truth).zip(valid) {
        if !v {
            continue;
        }
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fne += 1,
        }
    }
    let n = tp + fp + tn + fne;
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    let none_anywhere = tp + fp + fne == 0;
    let ratio = |num: u64, den: u64| {
        if den > 0 {
            num as f64 / den as f64
        } else if none_anywhere {
            1.0
        } else {
            0.0
        }
    };
    Ok(BinaryMetrics { accuracy: (tp + tn) as f64 / n as f64, precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fne) })
}

/// Everything `evaluate` reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub weighted_accuracy: f64,
    pub weighted_iou: f64,
    pub weighted_accuracy_no_background: Option<f64>,
    pub weighted_iou_no_background: Option<f64>,
    pub binary: BinaryMetrics,
}

impl MetricsReport {
    pub fn compute(pred: &[u8], truth: &[u8], valid: &[bool]) -> Result<Self> {
        let cm = confusion(pred, truth, valid)?;
        Ok(MetricsReport {
            weighted_accuracy: weighted_accuracy(&cm),
            weighted_iou: weighted_iou(&cm),
            weighted_accuracy_no_background: weighted_accuracy_no_background(&cm),
            weighted_iou_no_background: weighted_iou_no_background(&cm),
            binary: binary_metrics(pred, truth, valid)?,
            confusion: cm,
        })
    }

    /// `key = value` text, one metric per line, per-class lines named by `names`.
    pub fn render(&self, names: &[&str]) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        let cm = &self.confusion;
        let _ = writeln!(s, "valid_pixels = {}", cm.valid_total);
        let _ = writeln!(s, "background_included = true");
        let _ = writeln!(s, "weighted_accuracy = {:.6}", self.weighted_accuracy);
        let _ = writeln!(s, "weighted_iou = {:.6}", self.weighted_iou);
        let _ = writeln!(s, "weighted_accuracy_no_background = {}", opt(self.weighted_accuracy_no_background));
        let _ = writeln!(s, "weighted_iou_no_background = {}", opt(self.weighted_iou_no_background));
        let _ = writeln!(s, "binary_accuracy = {:.6}", self.binary.accuracy);
        let _ = writeln!(s, "binary_precision = {:.6}", self.binary.precision);
        let _ = writeln!(s, "binary_recall = {:.6}", self.binary.recall);
        for c in 0..NUM_CLASSES {
            let name = names.get(c).copied().unwrap_or("?");
            let _ = writeln!(s, "class.{c}.{name} = n {} recall {} iou {}", cm.row_sum(c), opt(cm.recall(c)), opt(cm.iou(c)));
        }
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(&[]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u8 = 1;
    const B: u8 = 2;

    #[test]
    fn identical_masks_are_diagonal_and_perfect() {
        let m = [0, 1, 2, 3, 3, 7];
        let cm = confusion(&m, &m, &[true; 6]).unwrap();
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                assert!(t == p || cm.counts[t][p] == 0);
            }
        }
        assert_eq!(weighted_accuracy(&cm), 1.0);
        assert_eq!(weighted_iou(&cm), 1.0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let cm = confusion(&[A, A, B, B], &[A, B, B, B], &[true; 4]).unwrap();
        assert_eq!(cm.counts[A as usize][A as usize], 1);
        assert_eq!(cm.counts[B as usize][A as usize], 1);
        assert_eq!(cm.counts[B as usize][B as usize], 2);
        assert_eq!(weighted_accuracy(&cm), 0.75);
    }

    #[test]
    fn no_valid_pixels() {
        assert_eq!(confusion(&[0], &[0], &[false]).unwrap_err(), MetricsError::NoValidPixels);
        assert_eq!(MetricsError::NoValidPixels.to_string(), "no valid pixels");
    }

    #[test]
    fn row_band_against_column_band() {
        let mut truth = [0u8; 16];
        let mut pred = [0u8; 16];
        for r in 0..4 {
            for c in 0..4 {
                if r < 2 {
                    truth[r * 4 + c] = A;
                }
                if c < 2 {
                    pred[r * 4 + c] = A;
                }
            }
        }
        let cm = confusion(&pred, &truth, &[true; 16]).unwrap();
        assert!((cm.iou(A as usize).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn binary_all_background_prediction() {
        let b = binary_metrics(&[0, 0, 0, 0], &[0, 0, 3, 3], &[true; 4]).unwrap();
        assert_eq!(b, BinaryMetrics { accuracy: 0.5, precision: 0.0, recall: 0.0 });
        let same = binary_metrics(&[0, 2, 5, 0], &[0, 2, 5, 0], &[true; 4]).unwrap();
        assert_eq!(same, BinaryMetrics { accuracy: 1.0, precision: 1.0, recall: 1.0 });
        let empty = binary_metrics(&[0, 0], &[0, 0], &[true; 2]).unwrap();
        assert_eq!((empty.precision, empty.recall), (1.0, 1.0));
    }

    #[test]
    fn background_variants_differ() {
        let report = MetricsReport::compute(&[0, 0, 1, 0], &[0, 0, 1, 1], &[true; 4]).unwrap();
        assert_eq!(report.weighted_accuracy_no_background, Some(0.5));
        assert!((report.weighted_accuracy - 0.75).abs() < 1e-15);
        let text = report.render(&["BACKGROUND", "RCC"]);
        assert!(text.contains("weighted_accuracy = 0.750000"));
        assert!(text.contains("class.1.RCC = n 2 recall 0.500000"));
    }

    #[test]
    fn merge_by_addition() {
        let a = confusion(&[1, 2], &[1, 1], &[true; 2]).unwrap();
        let b = confusion(&[0], &[0], &[true]).unwrap();
        let mut ab = a;
        ab += b;
        assert_eq!(ab, confusion(&[1, 2, 0], &[1, 1, 0], &[true; 3]).unwrap());
    }
}
