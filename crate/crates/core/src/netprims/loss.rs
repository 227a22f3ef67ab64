//! Softmax and cross-entropy with max-subtraction stability.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: F = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy loss −log softmax(logits)[label] and its gradient
/// softmax(logits) − one_hot(label).
pub fn softmax_cross_entropy<F: Scalar>(logits: &[F], label: usize) -> Result<(F, Vec<F>)> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum_exp: F = logits.iter().map(|&z| (z - max).exp()).fold(F::zero(), |a, b| a + b);
    let log_sum = sum_exp.ln() + max;
    let loss = log_sum - logits[label];
    let mut grad: Vec<F> = logits.iter().map(|&z| (z - log_sum).exp()).collect();
    grad[label] -= F::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let (loss, _) = softmax_cross_entropy(&[0.0f64; 4], 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12, "{loss}");
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0f64, 0.0], 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gradient_is_softmax_minus_one_hot() {
        let logits = [0.3f64, -0.7, 1.1];
        let (_, grad) = softmax_cross_entropy(&logits, 1).unwrap();
        let p = softmax(&logits);
        for i in 0..3 {
            let want = p[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((grad[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_label_is_invalid() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f64, 0.0], 2),
            Err(Error::InvalidInput(_))
        ));
    }
}
