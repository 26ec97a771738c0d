//! Multi-step discounted prediction loss.

use crate::state::STATE_DIM;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction/truth length mismatch: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("gamma must be in (0, 1], got {0}")]
    BadGamma(f64),
}

/// (1/H) * sum_k gamma^k ||pred_k - truth_k||^2 + lambda * sum(kl_terms).
///
/// `pred[0]` is the one-step-ahead prediction. Any free-bits flooring is the
/// trainer's job; the terms are summed as given.
pub fn loss_multistep(
    pred: &[[f64; STATE_DIM]],
    truth: &[[f64; STATE_DIM]],
    gamma: f64,
    lambda: f64,
    kl_terms: &[f64],
) -> Result<f64, LossError> {
    if pred.len() != truth.len() {
        return Err(LossError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(LossError::BadGamma(gamma));
    }
    let h = pred.len();
    let mut acc = 0.0;
    for (k, (p, t)) in pred.iter().zip(truth.iter()).enumerate() {
        let sq: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        acc += gamma.powi(k as i32 + 1) * sq;
    }
    Ok(acc / h as f64 + lambda * kl_terms.iter().sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let s = [[0.7; STATE_DIM]; 4];
        assert_eq!(loss_multistep(&s, &s, 0.95, 0.0, &[]), Ok(0.0));
    }

    /// H=1, gamma=1, error vector (3,4,0,...) -> 25.
    #[test]
    fn single_step_squared_norm() {
        let mut pred = [[0.0; STATE_DIM]];
        pred[0][0] = 3.0;
        pred[0][1] = 4.0;
        let truth = [[0.0; STATE_DIM]];
        let l = loss_multistep(&pred, &truth, 1.0, 0.0, &[]).unwrap();
        assert!((l - 25.0).abs() < 1e-12);
    }

    /// H=2, gamma=0.5, per-step squared norms 8 and 8 -> (0.5*8 + 0.25*8)/2 = 3.
    #[test]
    fn discounted_two_step() {
        let mut pred = [[0.0; STATE_DIM]; 2];
        for k in 0..2 {
            pred[k][0] = 2.0;
            pred[k][1] = 2.0;
        }
        let truth = [[0.0; STATE_DIM]; 2];
        let l = loss_multistep(&pred, &truth, 0.5, 0.0, &[]).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = [[0.0; STATE_DIM]; 2];
        let b = [[0.0; STATE_DIM]; 3];
        assert_eq!(
            loss_multistep(&a, &b, 0.9, 0.0, &[]),
            Err(LossError::LengthMismatch { pred: 2, truth: 3 })
        );
    }

    #[test]
    fn latent_terms_added() {
        let s = [[0.0; STATE_DIM]];
        let l = loss_multistep(&s, &s, 1.0, 2.0, &[0.5, 1.5]).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
    }
}
