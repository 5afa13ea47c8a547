//! Task losses. Both return the mean loss and its exact gradient with
//! respect to the predictions.

use crate::error::{Error, Result};

/// Sigmoid outputs are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before BCE.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_lengths(predicted: &[f64], actual: &[f64]) -> Result<()> {
    if predicted.is_empty() {
        return Err(Error::Validation("loss over an empty batch".into()));
    }
    if predicted.len() != actual.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} targets",
            predicted.len(),
            actual.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy. The gradient is that of the clamped loss,
/// so it is zero for predictions outside the clamp interval.
pub fn bce_loss(predicted: &[f64], actual: &[f64]) -> Result<LossOutput> {
    check_lengths(predicted, actual)?;
    if let Some(y) = actual.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Validation(format!("label {y} is not 0 or 1")));
    }
    let n = predicted.len() as f64;
    let mut loss = 0.0;
    let grad = predicted
        .iter()
        .zip(actual)
        .map(|(&p, &y)| {
            let q = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            if !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&p) {
                0.0
            } else {
                (-y / q + (1.0 - y) / (1.0 - q)) / n
            }
        })
        .collect();
    Ok(LossOutput { loss: loss / n, grad })
}

/// Mean squared error.
pub fn mse_loss(predicted: &[f64], actual: &[f64]) -> Result<LossOutput> {
    check_lengths(predicted, actual)?;
    let n = predicted.len() as f64;
    let mut loss = 0.0;
    let grad = predicted
        .iter()
        .zip(actual)
        .map(|(&p, &y)| {
            let r = p - y;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    Ok(LossOutput { loss: loss / n, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_half_is_ln2() {
        let out = bce_loss(&[0.5], &[1.0]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_predictions_hit_clamp_floor() {
        let out = bce_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(out.loss <= -(1.0 - PROB_FLOOR).ln() + 1e-15);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn bce_rejects_soft_labels() {
        assert!(matches!(bce_loss(&[0.3], &[0.5]), Err(Error::Validation(_))));
    }

    #[test]
    fn mse_values() {
        let out = mse_loss(&[0.0], &[3.0]).unwrap();
        assert_eq!(out.loss, 9.0);
        assert_eq!(out.grad, vec![-6.0]);
        assert_eq!(mse_loss(&[1.5, -2.0], &[1.5, -2.0]).unwrap().loss, 0.0);
        assert!(matches!(mse_loss(&[], &[]), Err(Error::Validation(_))));
    }
}
