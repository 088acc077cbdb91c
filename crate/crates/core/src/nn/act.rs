//! Elementwise activations.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// `d_input` from `d_out` and the layer *output* (relu output is zero
/// exactly where its derivative is zero).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(output.shape(), d_out.shape());
    let mut d_in = d_out.clone();
    for (d, &y) in d_in.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *d = T::zero();
        }
    }
    d_in
}

pub fn tanh_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.tanh();
    }
    out
}

pub fn tanh_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(output.shape(), d_out.shape());
    let mut d_in = d_out.clone();
    for (d, &y) in d_in.data_mut().iter_mut().zip(output.data()) {
        *d = *d * (T::one() - y * y);
    }
    d_in
}
