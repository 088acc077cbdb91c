//! Mean squared error, reduced as: mean over samples, sum over output dims.
//!
//! The network heads are scalar-valued, so `pred`/`target` hold one value
//! per sample and the reduction is simply the mean of squared errors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            context: "mse".into(),
            expected: format!("{}", pred.len()),
            got: format!("{}", target.len()),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("mse over empty vectors".into()));
    }
    let n = T::from_usize(pred.len()).unwrap();
    let mut acc = T::zero();
    for (p, t) in pred.iter().zip(target) {
        let d = *p - *t;
        acc += d * d;
    }
    Ok(acc / n)
}

/// `d mse / d pred_i = 2 (pred_i - target_i) / n`.
pub fn mse_grad<T: Scalar>(pred: &[T], target: &[T]) -> Result<Vec<T>> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            context: "mse_grad".into(),
            expected: format!("{}", pred.len()),
            got: format!("{}", target.len()),
        });
    }
    let scale = T::from_f64(2.0).unwrap() / T::from_usize(pred.len()).unwrap();
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| scale * (*p - *t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_when_equal() {
        assert_eq!(mse(&[0.5f32, -0.25], &[0.5, -0.25]).unwrap(), 0.0);
    }

    #[test]
    fn scalar_case() {
        assert_eq!(mse(&[0.5f64], &[-0.5]).unwrap(), 1.0);
    }

    #[test]
    fn batch_mean() {
        // samples (pred, target): (0,1) and (2,2) -> mean of {1, 0} = 0.5
        assert_eq!(mse(&[0.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(mse(&[0.0f32], &[1.0, 2.0]).is_err());
    }
}
