//! Fully connected layer: `y = W x + b`, weights `[out, in]` row-major.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn fc_forward<T: Scalar>(
    input: &[T],
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Vec<T>> {
    let [out_dim, in_dim] = match weights.shape() {
        [o, i] => [*o, *i],
        other => {
            return Err(Error::ShapeMismatch {
                context: "fc weights".into(),
                expected: "rank-2 matrix".into(),
                got: format!("{other:?}"),
            })
        }
    };
    if input.len() != in_dim {
        return Err(Error::ShapeMismatch {
            context: "fc input".into(),
            expected: format!("{in_dim}"),
            got: format!("{}", input.len()),
        });
    }
    if bias.shape() != [out_dim] {
        return Err(Error::ShapeMismatch {
            context: "fc bias".into(),
            expected: format!("[{out_dim}]"),
            got: format!("{:?}", bias.shape()),
        });
    }
    let w = weights.data();
    let b = bias.data();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        out.push(b[o] + crate::nn::conv::dot8(row, input));
    }
    Ok(out)
}

pub struct FcGrads<T> {
    pub d_input: Vec<T>,
    pub d_weights: Tensor<T>,
    pub d_bias: Tensor<T>,
}

pub fn fc_backward<T: Scalar>(input: &[T], weights: &Tensor<T>, d_out: &[T]) -> FcGrads<T> {
    let (out_dim, in_dim) = (weights.shape()[0], weights.shape()[1]);
    debug_assert_eq!(input.len(), in_dim);
    debug_assert_eq!(d_out.len(), out_dim);
    let w = weights.data();
    let mut d_input = vec![T::zero(); in_dim];
    let mut d_weights = Tensor::zeros(weights.shape());
    let dw = d_weights.data_mut();
    for o in 0..out_dim {
        let g = d_out[o];
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            d_input[i] += g * row[i];
            drow[i] = g * input[i];
        }
    }
    let d_bias = Tensor::from_vec(&[out_dim], d_out.to_vec()).expect("bias grad shape");
    FcGrads {
        d_input,
        d_weights,
        d_bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matrix_zero_bias_is_identity() {
        let w = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = Tensor::zeros(&[3]);
        let x = vec![0.3f32, -1.5, 2.0];
        assert_eq!(fc_forward(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn hand_case() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(fc_forward(&[1.0, 1.0], &w, &b).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let w = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(fc_forward(&[1.0, 2.0], &w, &b).is_err());
    }

    #[test]
    fn matches_naive_double_loop_oracle() {
        use crate::util::rng_from;
        use rand_chacha::rand_core::Rng;
        let mut rng = rng_from(5);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
                .collect()
        };
        let (out_dim, in_dim) = (8, 16);
        let w = Tensor::from_vec(&[out_dim, in_dim], draw(out_dim * in_dim)).unwrap();
        let b = Tensor::from_vec(&[out_dim], draw(out_dim)).unwrap();
        let x = draw(in_dim);

        let got = fc_forward(&x, &w, &b).unwrap();
        for o in 0..out_dim {
            let mut acc = b.at(&[o]);
            for i in 0..in_dim {
                acc += w.at(&[o, i]) * x[i];
            }
            // The blocked reduction may differ from the sequential oracle
            // by the last ulp.
            assert!((got[o] - acc).abs() <= 1e-12 * acc.abs().max(1.0));
        }
    }
}
