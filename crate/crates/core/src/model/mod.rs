//! The three-head driving network: a shared five-layer conv stack feeding
//! three fully connected heads — source steering, source lane-departure
//! level, target steering. Plus activation-map diagnostics and parameter
//! gradient checking.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv2d_forward, conv_output_dims, fc_backward, fc_forward, lrn_backward, lrn_forward,
    relu_backward, relu_forward, tanh_backward, tanh_forward, xavier_init, ConvSpec, LrnCache,
    LrnParams,
};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;
use crate::util::derive_seed;

pub const HEAD_SOURCE_STEER: usize = 0;
pub const HEAD_SOURCE_LDL: usize = 1;
pub const HEAD_TARGET_STEER: usize = 2;

/// Network input geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageSpec {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Architecture knobs. Kernel sizes and strides are fixed to the
/// five-conv reference layout (5x5/s2 three times, then 3x3/s1 twice,
/// LRN after the first three); channel counts, head widths, LRN
/// parameters and input size are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input: ImageSpec,
    pub conv_channels: [usize; 5],
    pub fc_widths: [usize; 4],
    pub lrn: LrnParams,
}

pub const CONV_KERNELS: [(usize, usize); 5] = [(5, 5), (5, 5), (5, 5), (3, 3), (3, 3)];
pub const CONV_STRIDES: [(usize, usize); 5] = [(2, 2), (2, 2), (2, 2), (1, 1), (1, 1)];
const LRN_LAYERS: [bool; 5] = [true, true, true, false, false];

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input: ImageSpec {
                height: 80,
                width: 160,
                channels: 3,
            },
            conv_channels: [8, 12, 16, 16, 16],
            fc_widths: [128, 64, 16, 1],
            lrn: LrnParams::default(),
        }
    }
}

impl NetworkConfig {
    /// Miniature instance used to finite-difference every parameter in
    /// seconds. Same topology, shrunk dims.
    pub fn verification() -> Self {
        NetworkConfig {
            input: ImageSpec {
                height: 64,
                width: 64,
                channels: 3,
            },
            conv_channels: [2, 3, 4, 3, 2],
            fc_widths: [8, 6, 4, 1],
            lrn: LrnParams::default(),
        }
    }

    pub fn conv_specs(&self) -> [ConvSpec; 5] {
        let mut specs = [ConvSpec {
            kernel: (0, 0),
            stride: (0, 0),
            in_channels: 0,
            out_channels: 0,
            lrn: None,
        }; 5];
        let mut in_ch = self.input.channels;
        for i in 0..5 {
            specs[i] = ConvSpec {
                kernel: CONV_KERNELS[i],
                stride: CONV_STRIDES[i],
                in_channels: in_ch,
                out_channels: self.conv_channels[i],
                lrn: if LRN_LAYERS[i] { Some(self.lrn) } else { None },
            };
            in_ch = self.conv_channels[i];
        }
        specs
    }

    /// `[h, w, c]` after each conv+relu(+lrn) block.
    pub fn conv_output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::with_capacity(5);
        let mut h = self.input.height;
        let mut w = self.input.width;
        for (i, spec) in self.conv_specs().iter().enumerate() {
            let (oh, ow) = conv_output_dims((h, w), spec.kernel, spec.stride).map_err(|e| {
                Error::InvalidParameter(format!("conv{} does not fit: {e}", i + 1))
            })?;
            h = oh;
            w = ow;
            shapes.push([h, w, spec.out_channels]);
        }
        Ok(shapes)
    }

    /// Flattened conv5 size; the input dim every head's first FC consumes.
    pub fn flat_dim(&self) -> Result<usize> {
        let shapes = self.conv_output_shapes()?;
        let last = shapes[4];
        Ok(last[0] * last[1] * last[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// One head: fc6..fc8 with ReLU, fc9 with Tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub layers: Vec<FcLayerParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetworkConfig,
    pub conv: Vec<ConvLayerParams<T>>,
    pub heads: [HeadParams<T>; 3],
}

impl<T: Scalar> NetworkParams<T> {
    /// Xavier-initialized network; every tensor gets its own child seed so
    /// layer shapes can change without shifting sibling streams.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.conv_output_shapes()?; // validate geometry up front
        let mut conv = Vec::with_capacity(5);
        for (i, spec) in config.conv_specs().iter().enumerate() {
            let (kh, kw) = spec.kernel;
            let fan_in = kh * kw * spec.in_channels;
            let fan_out = kh * kw * spec.out_channels;
            let weight = xavier_init(
                &[spec.out_channels, kh, kw, spec.in_channels],
                fan_in,
                fan_out,
                derive_seed(seed, &["conv", &i.to_string(), "w"]),
            )?;
            conv.push(ConvLayerParams {
                weight,
                bias: Tensor::zeros(&[spec.out_channels]),
            });
        }
        let flat = config.flat_dim()?;
        let mut heads = Vec::with_capacity(3);
        for h in 0..3 {
            let mut layers = Vec::with_capacity(4);
            let mut in_dim = flat;
            for (j, &out_dim) in config.fc_widths.iter().enumerate() {
                let weight = xavier_init(
                    &[out_dim, in_dim],
                    in_dim,
                    out_dim,
                    derive_seed(seed, &["head", &h.to_string(), &j.to_string(), "w"]),
                )?;
                layers.push(FcLayerParams {
                    weight,
                    bias: Tensor::zeros(&[out_dim]),
                });
                in_dim = out_dim;
            }
            heads.push(HeadParams { layers });
        }
        let heads: [HeadParams<T>; 3] = heads.try_into().ok().expect("three heads");
        Ok(NetworkParams {
            config,
            conv,
            heads,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Canonical (name, tensor) listing; the checkpoint format and the
    /// optimizer slot order both follow it.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("conv{}.w", i + 1), &layer.weight));
            out.push((format!("conv{}.b", i + 1), &layer.bias));
        }
        for (h, head) in self.heads.iter().enumerate() {
            for (j, layer) in head.layers.iter().enumerate() {
                out.push((format!("f{}.fc{}.w", h + 1, j + 6), &layer.weight));
                out.push((format!("f{}.fc{}.b", h + 1, j + 6), &layer.bias));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config,
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayerParams {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            heads: [0, 1, 2].map(|h| HeadParams {
                layers: self.heads[h]
                    .layers
                    .iter()
                    .map(|l| FcLayerParams {
                        weight: l.weight.cast(),
                        bias: l.bias.cast(),
                    })
                    .collect(),
            }),
        }
    }
}

/// Outputs of a full forward pass. All heads share one conv5 evaluation.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<T> {
    /// Steering command predicted by the source head, in (-1, 1).
    pub y_source: T,
    /// Lane departure level predicted by the source head, in (-1, 1).
    pub ldl_source: T,
    /// Steering command predicted by the target head, in (-1, 1).
    pub y_target: T,
    /// Post-activation conv5 feature map `[h, w, c]`.
    pub conv5: Tensor<T>,
}

/// Per-layer buffers retained by a training forward pass.
pub struct ConvStackCache<T> {
    conv_inputs: Vec<Tensor<T>>,
    relu_outputs: Vec<Tensor<T>>,
    lrn_caches: Vec<Option<LrnCache<T>>>,
}

pub struct HeadCache<T> {
    inputs: Vec<Vec<T>>,
    outputs: Vec<Vec<T>>,
}

impl<T: Scalar> HeadCache<T> {
    pub fn output(&self) -> T {
        self.outputs.last().unwrap()[0]
    }
}

fn check_input<T: Scalar>(params: &NetworkParams<T>, image: &Tensor<T>) -> Result<()> {
    let want = params.config.input.shape();
    if image.shape() != want {
        return Err(Error::ShapeMismatch {
            context: "network input".into(),
            expected: format!("{want:?}"),
            got: format!("{:?}", image.shape()),
        });
    }
    Ok(())
}

/// Conv stack forward with caches. The returned tensor is the post-relu
/// conv5 feature map (LRN does not apply to the last two layers).
pub fn conv_stack_forward<T: Scalar>(
    params: &NetworkParams<T>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, ConvStackCache<T>)> {
    check_input(params, image)?;
    let specs = params.config.conv_specs();
    let mut cache = ConvStackCache {
        conv_inputs: Vec::with_capacity(5),
        relu_outputs: Vec::with_capacity(5),
        lrn_caches: Vec::with_capacity(5),
    };
    let mut x = image.clone();
    for (i, spec) in specs.iter().enumerate() {
        let conv_out = conv2d_forward(&x, &params.conv[i].weight, &params.conv[i].bias, spec.stride)?;
        let relu_out = relu_forward(&conv_out);
        drop(conv_out);
        cache.conv_inputs.push(x);
        let next = match &spec.lrn {
            Some(lrn) => {
                let (y, lc) = lrn_forward(&relu_out, lrn)?;
                cache.lrn_caches.push(Some(lc));
                y
            }
            None => {
                cache.lrn_caches.push(None);
                relu_out.clone()
            }
        };
        cache.relu_outputs.push(relu_out);
        x = next;
    }
    Ok((x, cache))
}

pub fn head_forward<T: Scalar>(head: &HeadParams<T>, flat: &[T]) -> Result<HeadCache<T>> {
    let mut cache = HeadCache {
        inputs: Vec::with_capacity(head.layers.len()),
        outputs: Vec::with_capacity(head.layers.len()),
    };
    let n_layers = head.layers.len();
    let mut x = flat.to_vec();
    for (j, layer) in head.layers.iter().enumerate() {
        let z = fc_forward(&x, &layer.weight, &layer.bias)?;
        let zt = Tensor::from_vec(&[z.len()], z)?;
        let a = if j + 1 == n_layers {
            tanh_forward(&zt)
        } else {
            relu_forward(&zt)
        };
        cache.inputs.push(x);
        let a = a.into_data();
        cache.outputs.push(a.clone());
        x = a;
    }
    Ok(cache)
}

/// Forward through the shared stack and all three heads, no caches kept.
pub fn forward_all<T: Scalar>(
    params: &NetworkParams<T>,
    image: &Tensor<T>,
) -> Result<ForwardOutputs<T>> {
    let (conv5, _) = conv_stack_forward(params, image)?;
    let flat = conv5.data();
    let y_source = head_forward(&params.heads[HEAD_SOURCE_STEER], flat)?.output();
    let ldl_source = head_forward(&params.heads[HEAD_SOURCE_LDL], flat)?.output();
    let y_target = head_forward(&params.heads[HEAD_TARGET_STEER], flat)?.output();
    Ok(ForwardOutputs {
        y_source,
        ldl_source,
        y_target,
        conv5,
    })
}

/// Forward through the shared stack and a single head.
pub fn forward_head<T: Scalar>(
    params: &NetworkParams<T>,
    image: &Tensor<T>,
    head: usize,
) -> Result<T> {
    let (conv5, _) = conv_stack_forward(params, image)?;
    Ok(head_forward(&params.heads[head], conv5.data())?.output())
}

/// Source-head pair (steering, ldl) in one conv evaluation.
pub fn forward_source_pair<T: Scalar>(
    params: &NetworkParams<T>,
    image: &Tensor<T>,
) -> Result<(T, T)> {
    let (conv5, _) = conv_stack_forward(params, image)?;
    let flat = conv5.data();
    let y = head_forward(&params.heads[HEAD_SOURCE_STEER], flat)?.output();
    let l = head_forward(&params.heads[HEAD_SOURCE_LDL], flat)?.output();
    Ok((y, l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerGrads<T> {
    pub d_weight: Tensor<T>,
    pub d_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayerGrads<T> {
    pub d_weight: Tensor<T>,
    pub d_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T> {
    pub layers: Vec<FcLayerGrads<T>>,
}

impl<T: Scalar> HeadGrads<T> {
    pub fn zeros_like(head: &HeadParams<T>) -> Self {
        HeadGrads {
            layers: head
                .layers
                .iter()
                .map(|l| FcLayerGrads {
                    d_weight: Tensor::zeros(l.weight.shape()),
                    d_bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &HeadGrads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weight.add_assign(&b.d_weight);
            a.d_bias.add_assign(&b.d_bias);
        }
    }

    pub fn axpy(&mut self, k: T, other: &HeadGrads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weight.axpy(k, &b.d_weight);
            a.d_bias.axpy(k, &b.d_bias);
        }
    }

    pub fn scale(&mut self, k: T) {
        for l in self.layers.iter_mut() {
            l.d_weight.scale(k);
            l.d_bias.scale(k);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStackGrads<T> {
    pub layers: Vec<ConvLayerGrads<T>>,
}

impl<T: Scalar> ConvStackGrads<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        ConvStackGrads {
            layers: params
                .conv
                .iter()
                .map(|l| ConvLayerGrads {
                    d_weight: Tensor::zeros(l.weight.shape()),
                    d_bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ConvStackGrads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weight.add_assign(&b.d_weight);
            a.d_bias.add_assign(&b.d_bias);
        }
    }

    pub fn scale(&mut self, k: T) {
        for l in self.layers.iter_mut() {
            l.d_weight.scale(k);
            l.d_bias.scale(k);
        }
    }
}

/// Backward through one head. Returns the head gradients and the gradient
/// w.r.t. the flattened conv5 features.
pub fn head_backward<T: Scalar>(
    head: &HeadParams<T>,
    cache: &HeadCache<T>,
    d_output: T,
) -> (HeadGrads<T>, Vec<T>) {
    let n_layers = head.layers.len();
    let mut grads = Vec::with_capacity(n_layers);
    let mut d = vec![d_output];
    for j in (0..n_layers).rev() {
        let out = Tensor::from_vec(&[cache.outputs[j].len()], cache.outputs[j].clone()).unwrap();
        let d_t = Tensor::from_vec(&[d.len()], d).unwrap();
        let d_z = if j + 1 == n_layers {
            tanh_backward(&out, &d_t)
        } else {
            relu_backward(&out, &d_t)
        };
        let fg = fc_backward(&cache.inputs[j], &head.layers[j].weight, d_z.data());
        grads.push(FcLayerGrads {
            d_weight: fg.d_weights,
            d_bias: fg.d_bias,
        });
        d = fg.d_input;
    }
    grads.reverse();
    (HeadGrads { layers: grads }, d)
}

/// Backward through the conv stack given the gradient at the conv5
/// (post-relu) output. The image gradient is not needed by any caller and
/// is skipped for the first layer.
pub fn conv_stack_backward<T: Scalar>(
    params: &NetworkParams<T>,
    cache: &ConvStackCache<T>,
    d_conv5: &Tensor<T>,
) -> Result<ConvStackGrads<T>> {
    let specs = params.config.conv_specs();
    let mut grads: Vec<Option<ConvLayerGrads<T>>> = (0..5).map(|_| None).collect();
    let mut d = d_conv5.clone();
    for i in (0..5).rev() {
        if let Some(lrn) = &specs[i].lrn {
            let lc = cache.lrn_caches[i].as_ref().expect("lrn cache present");
            d = lrn_backward(&cache.relu_outputs[i], lrn, lc, &d);
        }
        d = relu_backward(&cache.relu_outputs[i], &d);
        let cg = crate::nn::conv2d_backward_opts(
            &cache.conv_inputs[i],
            &params.conv[i].weight,
            specs[i].stride,
            &d,
            i > 0,
        )?;
        grads[i] = Some(ConvLayerGrads {
            d_weight: cg.d_kernel,
            d_bias: cg.d_bias,
        });
        d = cg.d_input;
    }
    Ok(ConvStackGrads {
        layers: grads.into_iter().map(|g| g.unwrap()).collect(),
    })
}

/// Full-network gradient check against central finite differences.
///
/// Loss: sum of squared errors of the three head outputs against fixed
/// targets. Every parameter is perturbed by a relative step
/// `epsilon * max(|theta|, 0.01)`; the relative step keeps the probe well
/// inside each ReLU cell, where finite differences measure the true
/// derivative instead of kink artifacts. Perturbing every parameter is
/// only practical for [`NetworkConfig::verification`]-sized instances.
pub fn grad_check(
    params: &NetworkParams<f64>,
    image: &Tensor<f64>,
    targets: [f64; 3],
    epsilon: f64,
) -> Result<f64> {
    let loss = |p: &NetworkParams<f64>| -> Result<f64> {
        let out = forward_all(p, image)?;
        let d0 = out.y_source - targets[0];
        let d1 = out.ldl_source - targets[1];
        let d2 = out.y_target - targets[2];
        Ok(d0 * d0 + d1 * d1 + d2 * d2)
    };

    // Analytic gradients.
    let (conv5, conv_cache) = conv_stack_forward(params, image)?;
    let flat = conv5.data();
    let mut d_flat_total = vec![0.0f64; flat.len()];
    let mut head_grads = Vec::with_capacity(3);
    for (h, &target) in targets.iter().enumerate() {
        let hc = head_forward(&params.heads[h], flat)?;
        let d_out = 2.0 * (hc.output() - target);
        let (hg, d_flat) = head_backward(&params.heads[h], &hc, d_out);
        for (a, b) in d_flat_total.iter_mut().zip(&d_flat) {
            *a += *b;
        }
        head_grads.push(hg);
    }
    let d_conv5 = Tensor::from_vec(conv5.shape(), d_flat_total)?;
    let conv_grads = conv_stack_backward(params, &conv_cache, &d_conv5)?;

    // Assemble analytic gradients in canonical tensor order.
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    for g in &conv_grads.layers {
        analytic.push(g.d_weight.data().to_vec());
        analytic.push(g.d_bias.data().to_vec());
    }
    for hg in &head_grads {
        for l in &hg.layers {
            analytic.push(l.d_weight.data().to_vec());
            analytic.push(l.d_bias.data().to_vec());
        }
    }

    // Central differences, tensor by tensor, in the same order.
    let mut max_err = 0.0f64;
    let names = params.named_tensors();
    let mut work = params.clone();
    for (slot, (name, _)) in names.iter().enumerate() {
        let len = analytic[slot].len();
        for i in 0..len {
            let (point, step) = {
                let t = tensor_by_name_mut(&mut work, name);
                let orig = t.data()[i];
                let step = epsilon * orig.abs().max(0.01);
                t.data_mut()[i] = orig + step;
                (orig, step)
            };
            let plus = loss(&work)?;
            tensor_by_name_mut(&mut work, name).data_mut()[i] = point - step;
            let minus = loss(&work)?;
            tensor_by_name_mut(&mut work, name).data_mut()[i] = point;
            let numeric = (plus - minus) / (2.0 * step);
            let err = crate::nn::relative_error(analytic[slot][i], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

fn tensor_by_name_mut<'a, T: Scalar>(
    params: &'a mut NetworkParams<T>,
    name: &str,
) -> &'a mut Tensor<T> {
    // conv{i}.{w|b} or f{h}.fc{j}.{w|b}
    if let Some(rest) = name.strip_prefix("conv") {
        let idx: usize = rest[..1].parse().unwrap();
        let layer = &mut params.conv[idx - 1];
        if rest.ends_with(".w") {
            &mut layer.weight
        } else {
            &mut layer.bias
        }
    } else {
        let h: usize = name[1..2].parse().unwrap();
        let j: usize = name[5..6].parse().unwrap();
        let layer = &mut params.heads[h - 1].layers[j - 6];
        if name.ends_with(".w") {
            &mut layer.weight
        } else {
            &mut layer.bias
        }
    }
}

/// Weighted channel average of the conv5 features: the diagnostic map that
/// shows where the steering prediction looks.
///
/// Channel weights come from the head's first FC layer (summed over
/// spatial positions, signed), composed through the remaining FC layers by
/// absolute-value weight products. The map is min-max normalized to [0,1].
pub fn activation_map<T: Scalar>(conv5: &Tensor<T>, head: &HeadParams<T>) -> Result<Tensor<T>> {
    let [h, w, c] = match conv5.shape() {
        [a, b, cc] => [*a, *b, *cc],
        other => {
            return Err(Error::ShapeMismatch {
                context: "activation_map features".into(),
                expected: "rank-3 HWC tensor".into(),
                got: format!("{other:?}"),
            })
        }
    };
    let fc6 = &head.layers[0];
    let (fc6_out, fc6_in) = (fc6.weight.shape()[0], fc6.weight.shape()[1]);
    if fc6_in != h * w * c {
        return Err(Error::ShapeMismatch {
            context: "activation_map head".into(),
            expected: format!("fc6 input {}", h * w * c),
            got: format!("{fc6_in}"),
        });
    }

    // Influence of each fc6 unit on the final output via |W| products.
    let mut v = vec![T::one()];
    for layer in head.layers.iter().skip(1).rev() {
        let (out_dim, in_dim) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let wd = layer.weight.data();
        let mut nv = vec![T::zero(); in_dim];
        for o in 0..out_dim {
            for i in 0..in_dim {
                nv[i] += wd[o * in_dim + i].abs() * v[o];
            }
        }
        v = nv;
    }
    debug_assert_eq!(v.len(), fc6_out);

    // Per-channel weight: fc6 weights summed over spatial positions,
    // weighted by each unit's downstream influence.
    let wd = fc6.weight.data();
    let mut w_c = vec![T::zero(); c];
    for j in 0..fc6_out {
        let row = &wd[j * fc6_in..(j + 1) * fc6_in];
        for s in 0..h * w {
            for cc in 0..c {
                w_c[cc] += v[j] * row[s * c + cc];
            }
        }
    }

    let feat = conv5.data();
    let mut map = vec![T::zero(); h * w];
    for s in 0..h * w {
        let mut acc = T::zero();
        for cc in 0..c {
            acc += w_c[cc] * feat[s * c + cc];
        }
        map[s] = acc;
    }

    // Normalize to [0, 1]; a constant map becomes all zeros.
    let mut lo = map[0];
    let mut hi = map[0];
    for &m in &map {
        if m < lo {
            lo = m;
        }
        if m > hi {
            hi = m;
        }
    }
    let range = hi - lo;
    if range > T::zero() {
        for m in map.iter_mut() {
            *m = (*m - lo) / range;
        }
    } else {
        for m in map.iter_mut() {
            *m = T::zero();
        }
    }
    Tensor::from_vec(&[h, w], map)
}

/// Argmax cell of a 2D map, row-major `(y, x)`. First occurrence wins.
pub fn map_argmax<T: Scalar>(map: &Tensor<T>) -> (usize, usize) {
    let w = map.shape()[1];
    let mut best = (0usize, 0usize);
    let mut best_v = map.data()[0];
    for (i, &v) in map.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = (i / w, i % w);
        }
    }
    best
}

/// Receptive-field geometry of the conv stack: for conv5 cell index `i`
/// along one axis, the center of its receptive field in input pixels is
/// `offset + i * jump`.
pub fn receptive_field() -> (f64, f64) {
    let mut jump = 1.0f64;
    let mut rf = 1.0f64;
    for i in 0..5 {
        let k = CONV_KERNELS[i].0 as f64;
        let s = CONV_STRIDES[i].0 as f64;
        rf += (k - 1.0) * jump;
        jump *= s;
    }
    let offset = (rf - 1.0) / 2.0;
    (offset, jump)
}

/// Cheap deterministic fingerprint of parameter bytes, for freeze checks.
pub fn params_fingerprint(params: &NetworkParams<f32>) -> u64 {
    let mut bytes = Vec::new();
    for (name, t) in params.named_tensors() {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::util::fnv1a64(&bytes)
}

/// Clamp a scalar into [-1, 1]; used at policy boundaries.
pub fn clamp_unit<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x > one {
        one
    } else if x < -one {
        -one
    } else {
        x
    }
}

/// Convenience: cast a f64 constant.
pub fn k<T: Scalar>(x: f64) -> T {
    cast(x)
}
