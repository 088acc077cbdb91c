//! Xavier (Glorot) uniform initialization.

use rand_chacha::rand_core::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::rng_from;

/// Uniform draw from `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
///
/// Values are sampled in f64 from a ChaCha stream keyed by `rng_seed` and
/// cast to the working scalar, so the same seed yields the same weights
/// in both f32 and f64 instantiations.
pub fn xavier_init<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng_seed: u64,
) -> Result<Tensor<T>> {
    if fan_in < 1 || fan_out < 1 {
        return Err(Error::InvalidParameter(format!(
            "xavier fan_in/fan_out must be >= 1, got {fan_in}/{fan_out}"
        )));
    }
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::EmptyShape {
            shape: shape.to_vec(),
        });
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = rng_from(rng_seed);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let u01 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            T::from_f64((2.0 * u01 - 1.0) * bound).unwrap()
        })
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a = xavier_init::<f32>(&[4, 7], 28, 28, 99).unwrap();
        let b = xavier_init::<f32>(&[4, 7], 28, 28, 99).unwrap();
        assert_eq!(a.data(), b.data());
        let c = xavier_init::<f32>(&[4, 7], 28, 28, 100).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn bound_is_analytic_for_equal_fans() {
        // fan_in = fan_out = 3 -> sqrt(6/6) = 1
        let t = xavier_init::<f64>(&[1000], 3, 3, 1).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sample_variance_matches_uniform_theory() {
        // Var(U[-b, b]) = b^2/3 = 2/(fan_in+fan_out) = 0.01 for fans 100/100.
        let n = 100_000;
        let t = xavier_init::<f64>(&[n], 100, 100, 7).unwrap();
        let mean: f64 = t.data().iter().sum::<f64>() / n as f64;
        let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let expected = 2.0 / 200.0;
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "sample variance {var}, expected about {expected}"
        );
    }

    #[test]
    fn zero_dimension_shape_errors() {
        assert!(xavier_init::<f32>(&[3, 0], 3, 3, 1).is_err());
        assert!(xavier_init::<f32>(&[], 3, 3, 1).is_err());
        assert!(xavier_init::<f32>(&[3], 0, 3, 1).is_err());
    }
}
