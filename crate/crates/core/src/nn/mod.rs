//! Deterministic tensor/NN primitives: the five layer kinds of the
//! driving network, MSE loss, Adam, Xavier init and gradient checking.
//!
//! Kernels are pure functions over [`Tensor`]s; all reductions run in a
//! fixed order so results are bit-identical across runs and thread counts.

pub mod act;
pub mod adam;
pub mod conv;
pub mod fc;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod lrn;

pub use act::{relu_backward, relu_forward, tanh_backward, tanh_forward};
pub use adam::{AdamHyper, AdamState};
pub use conv::{conv2d_backward, conv2d_backward_opts, conv2d_forward, conv_output_dims, ConvGrads};
pub use fc::{fc_backward, fc_forward, FcGrads};
pub use gradcheck::{max_relative_error, relative_error};
pub use init::xavier_init;
pub use loss::{mse, mse_grad};
pub use lrn::{lrn_backward, lrn_forward, LrnCache};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Local response normalization parameters (inter-channel variant).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    /// Window size in channels.
    pub n: usize,
    /// Additive offset inside the denominator.
    pub k: f64,
    /// Scale of the squared-activation sum.
    pub alpha: f64,
    /// Denominator exponent.
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        // Classical defaults; the table in the architecture leaves them open.
        LrnParams {
            n: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

/// One layer of the conv stack: conv2d, then ReLU, then optional LRN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub lrn: Option<LrnParams>,
}

/// Shape-algebra view of a single layer, used to validate stacks before
/// any buffer is allocated.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        kernel: (usize, usize),
        stride: (usize, usize),
        in_channels: usize,
        out_channels: usize,
    },
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    Tanh,
    Lrn(LrnParams),
}

impl LayerSpec {
    /// Output shape for a given input shape, or an error when the layer
    /// cannot be applied (kernel larger than input, dim mismatch, n < 1).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Conv2d {
                kernel,
                stride,
                in_channels,
                out_channels,
            } => {
                if input.len() != 3 {
                    return Err(Error::ShapeMismatch {
                        context: "conv2d input".into(),
                        expected: "rank-3 HWC tensor".into(),
                        got: format!("{input:?}"),
                    });
                }
                if input[2] != *in_channels {
                    return Err(Error::ShapeMismatch {
                        context: "conv2d channels".into(),
                        expected: format!("{in_channels}"),
                        got: format!("{}", input[2]),
                    });
                }
                let (oh, ow) = conv_output_dims((input[0], input[1]), *kernel, *stride)?;
                Ok(vec![oh, ow, *out_channels])
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                let flat: usize = input.iter().product();
                if flat != *in_dim {
                    return Err(Error::ShapeMismatch {
                        context: "fully_connected input".into(),
                        expected: format!("{in_dim}"),
                        got: format!("{flat}"),
                    });
                }
                Ok(vec![*out_dim])
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::Lrn(p) => {
                if p.n < 1 {
                    return Err(Error::InvalidParameter("lrn window n must be >= 1".into()));
                }
                if input.is_empty() {
                    return Err(Error::ShapeMismatch {
                        context: "lrn input".into(),
                        expected: "tensor with a channel axis".into(),
                        got: "rank-0".into(),
                    });
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Chain shapes through a stack of layers.
pub fn chain_shapes(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input.to_vec();
    for layer in layers {
        cur = layer.output_shape(&cur)?;
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_convs() -> Vec<LayerSpec> {
        let ks = [(5, 5), (5, 5), (5, 5), (3, 3), (3, 3)];
        let ss = [(2, 2), (2, 2), (2, 2), (1, 1), (1, 1)];
        let ch = [3usize, 8, 12, 16, 16, 16];
        (0..5)
            .map(|i| LayerSpec::Conv2d {
                kernel: ks[i],
                stride: ss[i],
                in_channels: ch[i],
                out_channels: ch[i + 1],
            })
            .collect()
    }

    #[test]
    fn conv_chain_reproduces_reference_spatial_sizes() {
        // 300 wide x 120 high input; shapes tracked as [h, w, c].
        let shapes = chain_shapes(&table1_convs(), &[120, 300, 3]).unwrap();
        let spatial: Vec<(usize, usize)> = shapes.iter().map(|s| (s[1], s[0])).collect();
        assert_eq!(
            spatial,
            vec![(148, 58), (72, 27), (34, 12), (32, 10), (30, 8)]
        );
    }

    #[test]
    fn undersized_input_errors_before_any_nonpositive_dim() {
        let err = chain_shapes(&table1_convs(), &[60, 150, 3]).unwrap_err();
        assert!(matches!(err, Error::KernelTooLarge { .. }), "{err}");
    }
}
