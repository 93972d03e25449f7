//! Multi-label evaluation: mAP plus per-class (CP/CR/CF1) and overall
//! (OP/OR/OF1) precision, recall and F1 at a fixed threshold.
//!
//! Conventions:
//! - AP ranks by score descending, ties broken by sample index ascending.
//! - A class without positives has no AP and is left out of mAP.
//! - Zero denominators give 0 (precision with no predictions, recall with
//!   no positives, F1 with P = R = 0).
//! - CF1 is the harmonic mean of CP and CR, not the mean of per-class F1.

use serde::{Deserialize, Serialize};

use crate::numeric::{LabelMatrix, Matrix};
use crate::{Error, Result};

/// Average precision of one ranking, or `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[inline]
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[inline]
fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub of1: f64,
    pub threshold: f64,
    /// Classes that contributed to mAP.
    pub map_classes: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "map,cp,cr,cf1,op,or,of1,threshold";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.map, self.cp, self.cr, self.cf1, self.op, self.or_, self.of1, self.threshold
        )
    }
}

pub fn evaluate(probs: &Matrix, truth: &LabelMatrix, threshold: f64) -> Result<MetricsReport> {
    if probs.shape() != truth.shape() {
        return Err(Error::DimensionMismatch {
            op: "evaluate",
            left: probs.shape(),
            right: truth.shape(),
        });
    }
    let (n, k) = probs.shape();
    let mut per_class_ap = Vec::with_capacity(k);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let (mut cp_sum, mut cr_sum) = (0.0, 0.0);
    let mut scores = vec![0.0; n];
    let mut labels = vec![false; n];
    for j in 0..k {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..n {
            let (p, y) = (probs.get(i, j), truth.get(i, j));
            scores[i] = p;
            labels[i] = y;
            match (p >= threshold, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        per_class_ap.push(average_precision(&scores, &labels));
        cp_sum += ratio(tp, tp + fp);
        cr_sum += ratio(tp, tp + fn_);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let aps: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let cp = if k == 0 { 0.0 } else { cp_sum / k as f64 };
    let cr = if k == 0 { 0.0 } else { cr_sum / k as f64 };
    let op = ratio(tp_all, tp_all + fp_all);
    let or_ = ratio(tp_all, tp_all + fn_all);
    Ok(MetricsReport {
        map,
        map_classes: aps.len(),
        per_class_ap,
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or_,
        of1: f1(op, or_),
        threshold,
        tp: tp_all,
        fp: fp_all,
        fn_: fn_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
    }

    #[test]
    fn hand_ranking() {
        let ap = average_precision(&[0.9, 0.7, 0.3], &[true, false, true]).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn single_positive_last() {
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut labels = vec![false; n];
        labels[n - 1] = true;
        assert!((average_precision(&scores, &labels).unwrap() - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_index() {
        // Equal scores: index 0 ranks first.
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
    }

    #[test]
    fn no_positives_is_undefined() {
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn perfect_predictions() {
        let y = LabelMatrix::from_rows(&[[1u8, 0, 1], [0, 1, 0], [1, 1, 0]]).unwrap();
        let r = evaluate(&y.to_matrix(), &y, 0.5).unwrap();
        for v in [r.map, r.cp, r.cr, r.cf1, r.op, r.or_, r.of1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn inverted_predictions() {
        let y = LabelMatrix::from_rows(&[[1u8, 0], [0, 1], [0, 0], [0, 0]]).unwrap();
        let probs = y.to_matrix().map(|v| 1.0 - v);
        let r = evaluate(&probs, &y, 0.5).unwrap();
        assert_eq!((r.op, r.or_, r.of1), (0.0, 0.0, 0.0));
        assert_eq!((r.cp, r.cr, r.cf1), (0.0, 0.0, 0.0));
        // Each class's only positive scores 0 while the other rows score 1,
        // so it ranks last of four: AP = 1/4.
        assert!((r.map - 0.25).abs() < 1e-12, "{}", r.map);
    }

    #[test]
    fn class_without_positives_is_excluded_from_map() {
        let y = LabelMatrix::from_rows(&[[1u8, 0], [0, 0]]).unwrap();
        let probs = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
        let r = evaluate(&probs, &y, 0.5).unwrap();
        assert_eq!(r.per_class_ap, vec![Some(1.0), None]);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.map_classes, 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(evaluate(&Matrix::zeros(2, 2), &LabelMatrix::zeros(2, 3), 0.5).is_err());
    }
}
