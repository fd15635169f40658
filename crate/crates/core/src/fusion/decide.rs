use serde::{Deserialize, Serialize};

use super::loss::{sigmoid, softmax};
use crate::dataset::{LabelVector, ScoreVector, TaskMode};

/// Class scores in `[0, 1]` and the labels decided from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scores: ScoreVector,
    pub decided: LabelVector,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Multi-class: softmax scores, argmax decision. Multi-label: sigmoid per
/// class, `score_k >= threshold_k` (the decided set may be empty).
///
/// `thresholds` must hold one value per class in multi-label mode and is
/// ignored otherwise.
pub fn decide(logits: &[f64], mode: TaskMode, thresholds: &[f64]) -> Prediction {
    match mode {
        TaskMode::MultiClass => {
            let scores = softmax(logits);
            let decided = LabelVector::one_hot(logits.len(), argmax(logits));
            Prediction {
                scores: ScoreVector::new(scores).expect("softmax of finite logits is finite"),
                decided,
            }
        }
        TaskMode::MultiLabel => {
            debug_assert_eq!(thresholds.len(), logits.len());
            let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let decided = LabelVector::new(scores.iter().zip(thresholds).map(|(&s, &t)| s >= t).collect());
            Prediction {
                scores: ScoreVector::new(scores).expect("sigmoid output is finite"),
                decided,
            }
        }
    }
}

/// Applies the decision rule directly to already-normalized scores, as the
/// LLM-only baseline does.
pub fn decide_scores(scores: &[f64], mode: TaskMode, thresholds: &[f64]) -> LabelVector {
    match mode {
        TaskMode::MultiClass => LabelVector::one_hot(scores.len(), argmax(scores)),
        TaskMode::MultiLabel => LabelVector::new(scores.iter().zip(thresholds).map(|(&s, &t)| s >= t).collect()),
    }
}
