//! Classification metrics from decided and target label vectors.
//!
//! Per-label precision, recall and F1 come from one-vs-rest confusion
//! counts. Any ratio whose denominator is zero is reported as 0. The
//! headline precision/recall/F1 are unweighted means over labels (macro);
//! micro-averaged values pool the counts of every label.

use serde::{Deserialize, Serialize};

use crate::dataset::{LabelSchema, LabelVector, TaskMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyKind {
    /// Multi-class: fraction of rows whose decided label equals the target.
    ExactMatch,
    /// Multi-label: fraction of rows whose decided set equals the target set.
    SubsetAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Rows where this label is in the target.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub accuracy_kind: AccuracyKind,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: Vec<LabelMetrics>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub rows: usize,
}

impl MetricsReport {
    /// Per-label metrics paired with their label names.
    pub fn named<'a>(&'a self, schema: &'a LabelSchema) -> impl Iterator<Item = (&'a str, &'a LabelMetrics)> {
        schema.labels().iter().map(String::as_str).zip(&self.per_label)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    // 2PR/(P+R) with the counts substituted; zero when nothing is predicted or true.
    ratio(2 * tp, 2 * tp + fp + fn_)
}

pub fn compute_metrics(decided: &[LabelVector], targets: &[LabelVector], mode: TaskMode) -> Result<MetricsReport> {
    if decided.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one row".into()));
    }
    if decided.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} decided rows but {} targets",
            decided.len(),
            targets.len()
        )));
    }
    let k = targets[0].len();
    let mut counts = vec![Counts::default(); k];
    let mut exact = 0usize;
    for (row, (d, t)) in decided.iter().zip(targets).enumerate() {
        if d.len() != k || t.len() != k {
            return Err(Error::InvalidArgument(format!(
                "row {row}: expected {k} labels, got {} decided and {} target",
                d.len(),
                t.len()
            )));
        }
        if d == t {
            exact += 1;
        }
        for (c, (&p, &y)) in counts.iter_mut().zip(d.bits().iter().zip(t.bits())) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    let per_label: Vec<LabelMetrics> = counts
        .iter()
        .map(|c| LabelMetrics {
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: f1(c.tp, c.fp, c.fn_),
            support: c.tp + c.fn_,
        })
        .collect();
    let mean = |f: fn(&LabelMetrics) -> f64| per_label.iter().map(f).sum::<f64>() / k as f64;
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |(a, b, c), x| (a + x.tp, b + x.fp, c + x.fn_));

    Ok(MetricsReport {
        accuracy: ratio(exact, decided.len()),
        accuracy_kind: match mode {
            TaskMode::MultiClass => AccuracyKind::ExactMatch,
            TaskMode::MultiLabel => AccuracyKind::SubsetAccuracy,
        },
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        micro_precision: ratio(tp, tp + fp),
        micro_recall: ratio(tp, tp + fn_),
        micro_f1: f1(tp, fp, fn_),
        per_label,
        rows: decided.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oh(k: usize, i: usize) -> LabelVector {
        LabelVector::one_hot(k, i)
    }

    #[test]
    fn perfect_predictions() {
        let t = vec![oh(3, 0), oh(3, 2), oh(3, 1)];
        let m = compute_metrics(&t, &t, TaskMode::MultiClass).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.micro_f1, 1.0);
    }

    #[test]
    fn two_class_hand_enumeration() {
        let decided = vec![oh(2, 0), oh(2, 0)];
        let targets = vec![oh(2, 0), oh(2, 1)];
        let m = compute_metrics(&decided, &targets, TaskMode::MultiClass).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_label[0].precision, 0.5);
        assert_eq!(m.per_label[0].recall, 1.0);
        assert!((m.per_label[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            m.per_label[1],
            LabelMetrics {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                support: 1
            }
        );
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_label_scores_zero() {
        let t = vec![oh(3, 0), oh(3, 1)];
        let m = compute_metrics(&t, &t, TaskMode::MultiClass).unwrap();
        assert_eq!(m.per_label[2], LabelMetrics::default());
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn subset_accuracy_needs_the_whole_set() {
        let decided = vec![
            LabelVector::new(vec![true, true, false]),
            LabelVector::new(vec![false, false, false]),
        ];
        let targets = vec![
            LabelVector::new(vec![true, false, false]),
            LabelVector::new(vec![false, false, false]),
        ];
        let m = compute_metrics(&decided, &targets, TaskMode::MultiLabel).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.accuracy_kind, AccuracyKind::SubsetAccuracy);
        assert_eq!(m.per_label[1].precision, 0.0);
        assert_eq!(m.micro_precision, 0.5);
        assert_eq!(m.micro_recall, 1.0);
    }

    #[test]
    fn shape_errors() {
        assert!(compute_metrics(&[], &[], TaskMode::MultiClass).is_err());
        assert!(compute_metrics(&[oh(2, 0)], &[oh(2, 0), oh(2, 1)], TaskMode::MultiClass).is_err());
        assert!(compute_metrics(&[oh(3, 0)], &[oh(2, 0)], TaskMode::MultiClass).is_err());
    }
}
