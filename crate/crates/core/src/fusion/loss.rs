//! Softmax cross-entropy and sigmoid binary cross-entropy, both evaluated in
//! their overflow-free forms, with gradients w.r.t. the logits.

use crate::dataset::LabelVector;
use crate::error::{Error, Result};

/// `log(sum(exp(z)))` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `-log softmax(logits)[target]`.
pub fn loss_multiclass(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target index {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// Loss and its gradient `softmax(z) - onehot(target)`.
pub fn multiclass_loss_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let loss = loss_multiclass(logits, target)?;
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Mean over classes of `BCE(sigmoid(z_k), y_k)`, computed as
/// `max(z, 0) - z*y + ln(1 + e^{-|z|})`.
pub fn loss_multilabel(logits: &[f64], target: &LabelVector) -> Result<f64> {
    check_lengths(logits, target)?;
    let total: f64 = logits
        .iter()
        .zip(target.bits())
        .map(|(&z, &y)| bce_with_logit(z, if y { 1.0 } else { 0.0 }))
        .sum();
    Ok(total / logits.len() as f64)
}

/// Loss and its gradient `(sigmoid(z) - y) / K`.
pub fn multilabel_loss_grad(logits: &[f64], target: &LabelVector) -> Result<(f64, Vec<f64>)> {
    let loss = loss_multilabel(logits, target)?;
    let k = logits.len() as f64;
    let grad = logits
        .iter()
        .zip(target.bits())
        .map(|(&z, &y)| (sigmoid(z) - if y { 1.0 } else { 0.0 }) / k)
        .collect();
    Ok((loss, grad))
}

fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn check_lengths(logits: &[f64], target: &LabelVector) -> Result<()> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} logits but target has {} labels",
            logits.len(),
            target.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = loss_multiclass(&[0.3; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn multiclass_is_stable_for_huge_logits() {
        let l = loss_multiclass(&[1000.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        let l = loss_multiclass(&[1000.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn multiclass_matches_closed_form() {
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let l = loss_multiclass(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((l - expected).abs() < 1e-14);
        assert!((l - 0.407_605_964_444_380_1).abs() < 1e-14);
    }

    #[test]
    fn multiclass_rejects_bad_index() {
        assert!(loss_multiclass(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn zero_logits_give_ln_2() {
        for bits in [vec![true, false, true], vec![false, false, false]] {
            let l = loss_multilabel(&[0.0; 3], &LabelVector::new(bits)).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn multilabel_is_stable_for_huge_logits() {
        let l = loss_multilabel(&[1000.0, 1000.0], &LabelVector::new(vec![true, true])).unwrap();
        assert!(l.is_finite() && l < 1e-12);
        let l = loss_multilabel(&[-1000.0], &LabelVector::new(vec![true])).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn multilabel_stable_form_matches_naive_form() {
        let target = LabelVector::new(vec![true, false]);
        let logits = [0.5, -0.5];
        let stable = loss_multilabel(&logits, &target).unwrap();

        let naive: f64 = logits
            .iter()
            .zip([1.0, 0.0])
            .map(|(&z, y): (&f64, f64)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 2.0;
        let closed = softplus(-0.5);
        assert!((stable - naive).abs() < 1e-15);
        assert!((stable - closed).abs() < 1e-15);
        assert!((stable - 0.474_076_984_180_106_7).abs() < 1e-15);
    }

    #[test]
    fn multilabel_rejects_length_mismatch() {
        assert!(loss_multilabel(&[0.0, 0.0], &LabelVector::new(vec![true])).is_err());
    }

    #[test]
    fn sigmoid_handles_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1e4) >= 0.0 && sigmoid(-1e4) < 1e-300);
        assert_eq!(sigmoid(1e4), 1.0);
    }
}
