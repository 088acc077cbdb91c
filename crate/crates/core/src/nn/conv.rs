//! 2D cross-correlation with valid padding, forward and backward.
//!
//! Layouts: input `[h, w, c_in]`, kernel `[c_out, kh, kw, c_in]`,
//! bias `[c_out]`, output `[oh, ow, c_out]`. The innermost axis of both
//! input and kernel is the channel, so the hot loops reduce over
//! contiguous memory.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output spatial dims: `floor((in - k) / s) + 1` per axis.
pub fn conv_output_dims(
    input: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize)> {
    let (ih, iw) = input;
    let (kh, kw) = kernel;
    let (sy, sx) = stride;
    if kh > ih {
        return Err(Error::KernelTooLarge {
            axis: "height",
            kernel: kh,
            input: ih,
        });
    }
    if kw > iw {
        return Err(Error::KernelTooLarge {
            axis: "width",
            kernel: kw,
            input: iw,
        });
    }
    if sy == 0 || sx == 0 {
        return Err(Error::InvalidParameter("conv stride must be >= 1".into()));
    }
    Ok(((ih - kh) / sy + 1, (iw - kw) / sx + 1))
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let [ih, iw, ci] = dims3(input, "conv2d input")?;
    let [co, kh, kw, kci] = dims4(kernel, "conv2d kernel")?;
    if kci != ci {
        return Err(Error::ShapeMismatch {
            context: "conv2d in_channels".into(),
            expected: format!("{ci}"),
            got: format!("{kci}"),
        });
    }
    if bias.shape() != [co] {
        return Err(Error::ShapeMismatch {
            context: "conv2d bias".into(),
            expected: format!("[{co}]"),
            got: format!("{:?}", bias.shape()),
        });
    }
    let (sy, sx) = stride;
    let (oh, ow) = conv_output_dims((ih, iw), (kh, kw), stride)?;

    let x = input.data();
    let w = kernel.data();
    let b = bias.data();
    let mut out = Tensor::zeros(&[oh, ow, co]);
    let o = out.data_mut();

    // Gather each input window into a contiguous buffer once, then reduce
    // the whole window against every output channel's (also contiguous)
    // kernel. Amortizes the copy over `co` dots and keeps them wide.
    let row_len = kw * ci;
    let patch_len = kh * row_len;
    let mut patch = vec![T::zero(); patch_len];
    for oy in 0..oh {
        let iy0 = oy * sy;
        for ox in 0..ow {
            let ix0 = ox * sx;
            for ky in 0..kh {
                let ibase = ((iy0 + ky) * iw + ix0) * ci;
                patch[ky * row_len..(ky + 1) * row_len]
                    .copy_from_slice(&x[ibase..ibase + row_len]);
            }
            let obase = (oy * ow + ox) * co;
            for c in 0..co {
                let wrow = &w[c * patch_len..(c + 1) * patch_len];
                o[obase + c] = b[c] + dot8(&patch, wrow);
            }
        }
    }
    Ok(out)
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes. The summation order is fixed, so results stay
/// bit-deterministic across runs and thread counts.
#[inline]
pub(crate) fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x8, y8) in ca.zip(cb) {
        for lane in 0..8 {
            acc[lane] += x8[lane] * y8[lane];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Gradients produced by one conv backward pass.
pub struct ConvGrads<T> {
    pub d_input: Tensor<T>,
    pub d_kernel: Tensor<T>,
    pub d_bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: (usize, usize),
    d_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_opts(input, kernel, stride, d_out, true)
}

/// Backward with an optional input gradient: the first layer's caller
/// never consumes the image gradient, and skipping it saves a third of
/// the backward cost there.
pub fn conv2d_backward_opts<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: (usize, usize),
    d_out: &Tensor<T>,
    compute_d_input: bool,
) -> Result<ConvGrads<T>> {
    let [ih, iw, ci] = dims3(input, "conv2d input")?;
    let [co, kh, kw, _] = dims4(kernel, "conv2d kernel")?;
    let (sy, sx) = stride;
    let (oh, ow) = conv_output_dims((ih, iw), (kh, kw), stride)?;
    if d_out.shape() != [oh, ow, co] {
        return Err(Error::ShapeMismatch {
            context: "conv2d d_out".into(),
            expected: format!("[{oh}, {ow}, {co}]"),
            got: format!("{:?}", d_out.shape()),
        });
    }

    let x = input.data();
    let w = kernel.data();
    let g = d_out.data();

    let mut d_input = Tensor::zeros(&[ih, iw, ci]);
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(&[co]);
    let dx = d_input.data_mut();
    let dw = d_kernel.data_mut();
    let db = d_bias.data_mut();

    let row_len = kw * ci;
    for oy in 0..oh {
        let iy0 = oy * sy;
        for ox in 0..ow {
            let ix0 = ox * sx;
            let obase = (oy * ow + ox) * co;
            for c in 0..co {
                let gv = g[obase + c];
                if gv == T::zero() {
                    continue;
                }
                db[c] += gv;
                for ky in 0..kh {
                    let ibase = ((iy0 + ky) * iw + ix0) * ci;
                    let wbase = ((c * kh + ky) * kw) * ci;
                    let xrow = &x[ibase..ibase + row_len];
                    let dwrow = &mut dw[wbase..wbase + row_len];
                    if compute_d_input {
                        let wrow = &w[wbase..wbase + row_len];
                        let dxrow = &mut dx[ibase..ibase + row_len];
                        for i in 0..row_len {
                            dwrow[i] += gv * xrow[i];
                            dxrow[i] += gv * wrow[i];
                        }
                    } else {
                        for i in 0..row_len {
                            dwrow[i] += gv * xrow[i];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        d_input,
        d_kernel,
        d_bias,
    })
}

fn dims3<T: Scalar>(t: &Tensor<T>, ctx: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(Error::ShapeMismatch {
            context: ctx.into(),
            expected: "rank-3 tensor".into(),
            got: format!("{other:?}"),
        }),
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, ctx: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => Err(Error::ShapeMismatch {
            context: ctx.into(),
            expected: "rank-4 tensor".into(),
            got: format!("{other:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let input =
            Tensor::<f32>::from_vec(&[3, 4, 1], (0..12).map(|i| i as f32 * 0.5).collect()).unwrap();
        let kernel = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0f32]).unwrap();
        let bias = Tensor::from_vec(&[1], vec![0.0f32]).unwrap();
        let out = conv2d_forward(&input, &kernel, &bias, (1, 1)).unwrap();
        assert_eq!(out.shape(), &[3, 4, 1]);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn all_ones_box_sums_window() {
        let input = Tensor::<f32>::from_vec(&[5, 5, 1], vec![1.0; 25]).unwrap();
        let kernel = Tensor::from_vec(&[1, 3, 3, 1], vec![1.0f32; 9]).unwrap();
        let bias = Tensor::from_vec(&[1], vec![0.0f32]).unwrap();
        let out = conv2d_forward(&input, &kernel, &bias, (1, 1)).unwrap();
        assert_eq!(out.shape(), &[3, 3, 1]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn reference_input_strided_shape() {
        // width 300 x height 120, 5x5 kernel, stride 2 -> 148 x 58
        assert_eq!(
            conv_output_dims((120, 300), (5, 5), (2, 2)).unwrap(),
            (58, 148)
        );
    }

    #[test]
    fn oversized_kernel_names_the_axis() {
        let err = conv_output_dims((4, 10), (5, 5), (1, 1)).unwrap_err();
        match err {
            Error::KernelTooLarge { axis, .. } => assert_eq!(axis, "height"),
            other => panic!("unexpected: {other}"),
        }
        let err = conv_output_dims((10, 4), (5, 5), (1, 1)).unwrap_err();
        match err {
            Error::KernelTooLarge { axis, .. } => assert_eq!(axis, "width"),
            other => panic!("unexpected: {other}"),
        }
    }

    /// Brute-force cross-correlation oracle, kept deliberately naive.
    fn conv_oracle(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: (usize, usize),
    ) -> Tensor<f64> {
        let (ih, iw, ci) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        let oh = (ih - kh) / stride.0 + 1;
        let ow = (iw - kw) / stride.1 + 1;
        let mut out = Tensor::zeros(&[oh, ow, co]);
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..co {
                    let mut acc = bias.at(&[c]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for cc in 0..ci {
                                acc += input.at(&[oy * stride.0 + ky, ox * stride.1 + kx, cc])
                                    * kernel.at(&[c, ky, kx, cc]);
                            }
                        }
                    }
                    *out.at_mut(&[oy, ox, c]) = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle_on_random_case() {
        use crate::util::rng_from;
        use rand_chacha::rand_core::Rng;
        let mut rng = rng_from(11);
        let mut randvec = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
                .collect()
        };
        let input = Tensor::from_vec(&[9, 11, 3], randvec(9 * 11 * 3)).unwrap();
        let kernel = Tensor::from_vec(&[4, 3, 5, 3], randvec(4 * 3 * 5 * 3)).unwrap();
        let bias = Tensor::from_vec(&[4], randvec(4)).unwrap();
        let fast = conv2d_forward(&input, &kernel, &bias, (2, 1)).unwrap();
        let slow = conv_oracle(&input, &kernel, &bias, (2, 1));
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
