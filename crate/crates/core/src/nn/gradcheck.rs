//! Relative-error comparison between analytic and numeric gradients.
//!
//! The network-level checker (perturb every parameter of a small
//! three-head net against central finite differences) lives in
//! [`crate::model::grad_check`]; these are the shared pieces.

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error over two parallel gradient slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubled_gradient_reads_as_half_error() {
        // A corrupted (x2) analytic gradient must be flagged at ~0.5.
        let numeric = [0.3, -1.7, 42.0];
        let corrupted: Vec<f64> = numeric.iter().map(|v| v * 2.0).collect();
        let err = max_relative_error(&corrupted, &numeric);
        assert!((err - 0.5).abs() < 1e-12, "err = {err}");
    }

    #[test]
    fn matching_gradients_read_as_zero() {
        let g = [1.0, -2.0, 0.0];
        assert_eq!(max_relative_error(&g, &g), 0.0);
    }
}
