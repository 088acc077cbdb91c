//! Training loops: the joint source objective (steering + LDL through the
//! shared conv stack), the baseline steering-only objective, and the gated
//! target-head objective on frozen source features.
//!
//! Minibatch gradients are computed per-sample in parallel chunks of a
//! fixed size and reduced in index order, so results are bit-identical
//! across runs regardless of thread count. Cycle = one pass through the
//! training split; after each cycle the validation loss is evaluated and
//! the parameters of the best cycle (earliest on ties) are kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_train_val, stats_from_u8, DatasetStats};
use crate::error::{Error, Result};
use crate::model::{
    conv_stack_backward, conv_stack_forward, head_backward, head_forward, ConvStackGrads,
    HeadGrads, HeadParams, NetworkConfig, NetworkParams, HEAD_SOURCE_LDL, HEAD_SOURCE_STEER,
    HEAD_TARGET_STEER,
};
use crate::nn::{AdamHyper, AdamState};
use crate::tensor::Tensor;
use crate::transfer::{gate, gated_sample_dloss, gated_sample_loss, GateParams};
use crate::util::{derive_seed, derive_seed_n, shuffled_indices};

/// Per-sample parallelism granularity. A constant so the floating-point
/// reduction order never depends on the machine.
const GRAD_CHUNK: usize = 8;

/// One training observation at network-input resolution, 8 bits per
/// channel (quantized after crop/resize).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub pixels: Vec<u8>,
    pub steering: f32,
    pub ldl: f32,
}

/// Round a [0,1] tensor to 8-bit pixels.
pub fn quantize_input(t: &Tensor<f32>) -> Vec<u8> {
    t.data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Expand quantized pixels back to a normalized input tensor.
pub fn input_tensor(
    pixels: &[u8],
    config: &NetworkConfig,
    stats: &DatasetStats,
) -> Result<Tensor<f32>> {
    let spec = config.input;
    if pixels.len() != spec.pixel_count() {
        return Err(Error::ShapeMismatch {
            context: "train input".into(),
            expected: format!("{} pixels", spec.pixel_count()),
            got: format!("{}", pixels.len()),
        });
    }
    let c = spec.channels;
    let data: Vec<f32> = pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            (v as f32 / 255.0 - stats.mean[ch]) / stats.std[ch]
        })
        .collect();
    Tensor::from_vec(&spec.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub cycles: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub hyper: AdamHyper,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            cycles: 30,
            batch_size: 32,
            val_fraction: 0.05,
            hyper: AdamHyper::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub cycle: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean gate weight over the training split (target training only).
    pub mean_gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    /// Cycle whose parameters were kept (min validation loss, earliest tie).
    pub best_cycle: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cycle,train_loss,val_loss,mean_gate\n");
        for r in &self.rows {
            let gate = r
                .mean_gate
                .map(|g| format!("{g:?}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:?},{:?},{gate}\n",
                r.cycle, r.train_loss, r.val_loss
            ));
        }
        out.push_str(&format!("# best_cycle,{}\n", self.best_cycle));
        out
    }
}

/// Which objective drives the full network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointMode {
    /// Steering MSE + lambda1 * LDL MSE; trains conv, f1 and f2.
    Joint { lambda1: f32 },
    /// Steering MSE alone; trains conv and f1 (the from-scratch baseline).
    SteerOnly,
}

struct JointAccum {
    conv: ConvStackGrads<f32>,
    f1: HeadGrads<f32>,
    f2: HeadGrads<f32>,
    loss: f64,
}

impl JointAccum {
    fn zeros(params: &NetworkParams<f32>) -> Self {
        JointAccum {
            conv: ConvStackGrads::zeros_like(params),
            f1: HeadGrads::zeros_like(&params.heads[HEAD_SOURCE_STEER]),
            f2: HeadGrads::zeros_like(&params.heads[HEAD_SOURCE_LDL]),
            loss: 0.0,
        }
    }

    fn merge(&mut self, other: &JointAccum) {
        self.conv.add_assign(&other.conv);
        self.f1.add_assign(&other.f1);
        self.f2.add_assign(&other.f2);
        self.loss += other.loss;
    }
}

/// Forward/backward for one sample under the joint objective.
///
/// The LDL term's gradient contribution is computed unscaled and then
/// multiplied by `lambda1` exactly once, so doubling `lambda1` doubles
/// that contribution bit-for-bit. Returned pieces:
/// `(loss, conv grads, f1 grads, lambda-scaled f2 grads)`.
pub fn joint_sample_grads(
    params: &NetworkParams<f32>,
    input: &Tensor<f32>,
    steering: f32,
    ldl: f32,
    mode: JointMode,
) -> Result<(f64, ConvStackGrads<f32>, HeadGrads<f32>, HeadGrads<f32>)> {
    let (conv5, cache) = conv_stack_forward(params, input)?;
    let flat = conv5.data();

    let hc1 = head_forward(&params.heads[HEAD_SOURCE_STEER], flat)?;
    let p1 = hc1.output();
    let d1 = 2.0 * (p1 - steering);
    let (g1, mut d_flat) = head_backward(&params.heads[HEAD_SOURCE_STEER], &hc1, d1);

    let dy = (p1 - steering) as f64;
    let mut loss = dy * dy;

    let g2 = match mode {
        JointMode::Joint { lambda1 } => {
            let hc2 = head_forward(&params.heads[HEAD_SOURCE_LDL], flat)?;
            let p2 = hc2.output();
            let d2 = 2.0 * (p2 - ldl);
            let (mut g2, d_flat2) = head_backward(&params.heads[HEAD_SOURCE_LDL], &hc2, d2);
            g2.scale(lambda1);
            for (a, b) in d_flat.iter_mut().zip(&d_flat2) {
                *a += lambda1 * *b;
            }
            let dl = (p2 - ldl) as f64;
            loss += lambda1 as f64 * dl * dl;
            g2
        }
        JointMode::SteerOnly => HeadGrads::zeros_like(&params.heads[HEAD_SOURCE_LDL]),
    };

    let d_conv5 = Tensor::from_vec(conv5.shape(), d_flat)?;
    let conv = conv_stack_backward(params, &cache, &d_conv5)?;
    Ok((loss, conv, g1, g2))
}

fn joint_val_loss(
    params: &NetworkParams<f32>,
    samples: &[TrainSample],
    idx: &[usize],
    stats: &DatasetStats,
    mode: JointMode,
) -> Result<f64> {
    let losses: Result<Vec<f64>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = 0.0f64;
            for &i in chunk {
                let s = &samples[i];
                let input = input_tensor(&s.pixels, &params.config, stats)?;
                let (conv5, _) = conv_stack_forward(params, &input)?;
                let p1 = head_forward(&params.heads[HEAD_SOURCE_STEER], conv5.data())?.output();
                let dy = (p1 - s.steering) as f64;
                acc += dy * dy;
                if let JointMode::Joint { lambda1 } = mode {
                    let p2 = head_forward(&params.heads[HEAD_SOURCE_LDL], conv5.data())?.output();
                    let dl = (p2 - s.ldl) as f64;
                    acc += lambda1 as f64 * dl * dl;
                }
            }
            Ok(acc)
        })
        .collect();
    Ok(losses?.iter().sum::<f64>() / idx.len() as f64)
}

/// Names of the tensors the joint objective trains.
fn joint_trainable(mode: JointMode) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for i in 1..=5 {
        names.push(format!("conv{i}.w"));
        names.push(format!("conv{i}.b"));
    }
    for j in 6..=9 {
        names.push(format!("f1.fc{j}.w"));
        names.push(format!("f1.fc{j}.b"));
    }
    if matches!(mode, JointMode::Joint { .. }) {
        for j in 6..=9 {
            names.push(format!("f2.fc{j}.w"));
            names.push(format!("f2.fc{j}.b"));
        }
    }
    names
}

pub struct FullTrainOutcome {
    pub params: NetworkParams<f32>,
    pub stats: DatasetStats,
    pub log: TrainLog,
}

/// Train the full network from scratch under the given objective.
/// Statistics come from the training split only.
pub fn train_full_network(
    samples: &[TrainSample],
    config: NetworkConfig,
    mode: JointMode,
    opts: &TrainOptions,
) -> Result<FullTrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("train_full_network".into()));
    }
    let (train_idx, val_idx) = split_train_val(samples.len(), opts.val_fraction, opts.seed)?;
    let stats = stats_from_u8(
        train_idx.iter().map(|&i| samples[i].pixels.as_slice()),
        config.input.channels,
    )?;

    let mut params = NetworkParams::<f32>::init(config, derive_seed(opts.seed, &["init"]))?;

    // Optimizer slots over the trainable subset, in canonical name order.
    let trainable = joint_trainable(mode);
    let adam_refs: Vec<&Tensor<f32>> = {
        let named = params.named_tensors();
        trainable
            .iter()
            .map(|n| named.iter().find(|(nm, _)| nm == n).unwrap().1)
            .collect()
    };
    let mut adam = AdamState::new(opts.hyper, &adam_refs);

    let mut best: Option<(f64, NetworkParams<f32>, usize)> = None;
    let mut rows = Vec::with_capacity(opts.cycles);

    for cycle in 1..=opts.cycles {
        let order = shuffled_indices(
            train_idx.len(),
            derive_seed_n(opts.seed, &["cycle"], cycle as u64),
        );
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let chunks: Result<Vec<(JointAccum, usize)>> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut acc = JointAccum::zeros(&params);
                    for &oi in chunk {
                        let s = &samples[train_idx[oi]];
                        let input = input_tensor(&s.pixels, &params.config, &stats)?;
                        let (l, conv, g1, g2) =
                            joint_sample_grads(&params, &input, s.steering, s.ldl, mode)?;
                        acc.conv.add_assign(&conv);
                        acc.f1.add_assign(&g1);
                        acc.f2.add_assign(&g2);
                        acc.loss += l;
                    }
                    Ok((acc, chunk.len()))
                })
                .collect();
            let chunks = chunks?;
            let mut total = JointAccum::zeros(&params);
            for (acc, _) in &chunks {
                total.merge(acc);
            }
            let scale = 1.0 / batch.len() as f32;
            total.conv.scale(scale);
            total.f1.scale(scale);
            total.f2.scale(scale);
            loss_sum += total.loss;
            seen += batch.len();

            // Assemble gradient tensors in the optimizer's slot order.
            let mut grad_list: Vec<&Tensor<f32>> = Vec::with_capacity(trainable.len());
            for layer in &total.conv.layers {
                grad_list.push(&layer.d_weight);
                grad_list.push(&layer.d_bias);
            }
            for layer in &total.f1.layers {
                grad_list.push(&layer.d_weight);
                grad_list.push(&layer.d_bias);
            }
            if matches!(mode, JointMode::Joint { .. }) {
                for layer in &total.f2.layers {
                    grad_list.push(&layer.d_weight);
                    grad_list.push(&layer.d_bias);
                }
            }
            adam_step_named(
                &mut params,
                &mut adam,
                &trainable,
                &grad_list,
                matches!(mode, JointMode::Joint { .. }),
            )?;
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = joint_val_loss(&params, samples, &val_idx, &stats, mode)?;
        rows.push(TrainLogRow {
            cycle,
            train_loss,
            val_loss,
            mean_gate: None,
        });
        if best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true) {
            best = Some((val_loss, params.clone(), cycle));
        }
    }

    let (_, best_params, best_cycle) = best.expect("at least one cycle");
    Ok(FullTrainOutcome {
        params: best_params,
        stats,
        log: TrainLog {
            rows,
            best_cycle,
        },
    })
}

/// Apply one Adam step over the joint-objective tensor subset: the conv
/// stack, the f1 head, and (for the joint mode) the f2 head, in canonical
/// order matching `joint_trainable`.
fn adam_step_named(
    params: &mut NetworkParams<f32>,
    adam: &mut AdamState<f32>,
    names: &[String],
    grads: &[&Tensor<f32>],
    include_f2: bool,
) -> Result<()> {
    let mut refs: Vec<&mut Tensor<f32>> = Vec::with_capacity(names.len());
    for layer in params.conv.iter_mut() {
        refs.push(&mut layer.weight);
        refs.push(&mut layer.bias);
    }
    let [h1, h2, _h3] = &mut params.heads;
    for layer in h1.layers.iter_mut() {
        refs.push(&mut layer.weight);
        refs.push(&mut layer.bias);
    }
    if include_f2 {
        for layer in h2.layers.iter_mut() {
            refs.push(&mut layer.weight);
            refs.push(&mut layer.bias);
        }
    }
    assert_eq!(refs.len(), names.len());
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    adam.step(&mut refs, grads, &name_refs)
}

/// Frozen-source features for target-head training, computed once.
pub struct TargetFeatures {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<f32>,
    pub distill_steer: Vec<f32>,
    pub distill_ldl: Vec<f32>,
}

/// One pass of the frozen source network over the preprocessed target
/// samples: conv5 features plus the cached distillation targets.
pub fn precompute_target_features(
    source: &NetworkParams<f32>,
    samples: &[TrainSample],
    stats: &DatasetStats,
) -> Result<TargetFeatures> {
    let results: Result<Vec<(Vec<f32>, f32, f32)>> = samples
        .par_iter()
        .map(|s| {
            let input = input_tensor(&s.pixels, &source.config, stats)?;
            let (conv5, _) = conv_stack_forward(source, &input)?;
            let flat = conv5.data();
            let y_src = head_forward(&source.heads[HEAD_SOURCE_STEER], flat)?.output();
            let l_src = head_forward(&source.heads[HEAD_SOURCE_LDL], flat)?.output();
            Ok((flat.to_vec(), y_src, l_src))
        })
        .collect();
    let results = results?;
    Ok(TargetFeatures {
        features: results.iter().map(|(f, _, _)| f.clone()).collect(),
        labels: samples.iter().map(|s| s.steering).collect(),
        distill_steer: results.iter().map(|(_, y, _)| *y).collect(),
        distill_ldl: results.iter().map(|(_, _, l)| *l).collect(),
    })
}

/// How the per-sample trust weight is produced during target training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// Logistic gate of |distilled LDL|.
    Logistic(GateParams),
    /// Fixed weight for every sample (0 reduces the loss to plain MSE).
    Forced(f32),
    /// Plain label MSE with no distillation arithmetic at all.
    Plain,
}

pub struct TargetTrainOutcome {
    pub head: HeadParams<f32>,
    pub log: TrainLog,
}

/// Train the target head on frozen conv5 features with the gated loss.
/// Only the head's tensors receive gradients; the shared stack and source
/// heads are never touched.
pub fn train_target_head(
    source: &NetworkParams<f32>,
    data: &TargetFeatures,
    gate_mode: GateMode,
    opts: &TrainOptions,
) -> Result<TargetTrainOutcome> {
    let n = data.features.len();
    if n == 0 {
        return Err(Error::EmptyInput("train_target_head".into()));
    }
    let (train_idx, val_idx) = split_train_val(n, opts.val_fraction, opts.seed)?;

    let weights: Vec<f32> = match gate_mode {
        GateMode::Logistic(g) => data
            .distill_ldl
            .iter()
            .map(|l| gate(l.abs(), &g))
            .collect(),
        GateMode::Forced(w) => vec![w; n],
        GateMode::Plain => vec![0.0; n],
    };
    let plain = matches!(gate_mode, GateMode::Plain);
    let mean_gate = if plain {
        None
    } else {
        Some(
            train_idx.iter().map(|&i| weights[i] as f64).sum::<f64>() / train_idx.len() as f64,
        )
    };

    let mut head = source.heads[HEAD_TARGET_STEER].clone();
    let adam_refs: Vec<&Tensor<f32>> = head
        .layers
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .collect();
    let mut adam = AdamState::new(opts.hyper, &adam_refs);
    let names: Vec<String> = (6..=9)
        .flat_map(|j| [format!("f3.fc{j}.w"), format!("f3.fc{j}.b")])
        .collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();

    let sample_loss = |head: &HeadParams<f32>, i: usize| -> Result<f64> {
        let pred = head_forward(head, &data.features[i])?.output();
        let l = if plain {
            let d = data.labels[i] - pred;
            d * d
        } else {
            gated_sample_loss(pred, data.labels[i], data.distill_steer[i], weights[i])
        };
        Ok(l as f64)
    };

    let mut best: Option<(f64, HeadParams<f32>, usize)> = None;
    let mut rows = Vec::with_capacity(opts.cycles);
    for cycle in 1..=opts.cycles {
        let order = shuffled_indices(
            train_idx.len(),
            derive_seed_n(opts.seed, &["cycle"], cycle as u64),
        );
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(opts.batch_size) {
            let mut acc = HeadGrads::zeros_like(&head);
            for &oi in batch {
                let i = train_idx[oi];
                let hc = head_forward(&head, &data.features[i])?;
                let pred = hc.output();
                let (l, d) = if plain {
                    let diff = data.labels[i] - pred;
                    (diff * diff, 2.0 * (pred - data.labels[i]))
                } else {
                    (
                        gated_sample_loss(pred, data.labels[i], data.distill_steer[i], weights[i]),
                        gated_sample_dloss(pred, data.labels[i], data.distill_steer[i], weights[i]),
                    )
                };
                loss_sum += l as f64;
                let (g, _) = head_backward(&head, &hc, d);
                acc.add_assign(&g);
            }
            acc.scale(1.0 / batch.len() as f32);
            let grad_list: Vec<&Tensor<f32>> = acc
                .layers
                .iter()
                .flat_map(|l| [&l.d_weight, &l.d_bias])
                .collect();
            let mut refs: Vec<&mut Tensor<f32>> = Vec::with_capacity(8);
            for l in head.layers.iter_mut() {
                refs.push(&mut l.weight);
                refs.push(&mut l.bias);
            }
            adam.step(&mut refs, &grad_list, &name_refs)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let mut val_sum = 0.0f64;
        for &i in &val_idx {
            val_sum += sample_loss(&head, i)?;
        }
        let val_loss = val_sum / val_idx.len() as f64;
        rows.push(TrainLogRow {
            cycle,
            train_loss,
            val_loss,
            mean_gate,
        });
        if best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true) {
            best = Some((val_loss, head.clone(), cycle));
        }
    }
    let (_, best_head, best_cycle) = best.expect("at least one cycle");
    Ok(TargetTrainOutcome {
        head: best_head,
        log: TrainLog {
            rows,
            best_cycle,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{params_fingerprint, NetworkConfig};
    use rand_chacha::rand_core::Rng;

    fn synthetic_samples(n: usize, seed: u64, config: &NetworkConfig) -> Vec<TrainSample> {
        // Images whose mean brightness encodes the steering label; the
        // network only has to learn a global-average feature.
        let mut rng = crate::util::rng_from(seed);
        (0..n)
            .map(|_| {
                let y = ((rng.next_u32() % 2001) as f32 / 1000.0) - 1.0;
                let base = (128.0 + 80.0 * y) as i32;
                let pixels: Vec<u8> = (0..config.input.pixel_count())
                    .map(|_| {
                        let jitter = (rng.next_u32() % 21) as i32 - 10;
                        (base + jitter).clamp(0, 255) as u8
                    })
                    .collect();
                TrainSample {
                    pixels,
                    steering: y * 0.5,
                    ldl: y * 0.8,
                }
            })
            .collect()
    }

    fn tiny_config() -> NetworkConfig {
        NetworkConfig::verification()
    }

    #[test]
    fn lambda_scaling_doubles_the_ldl_contribution_bitwise() {
        let config = tiny_config();
        let params = NetworkParams::<f32>::init(config, 3).unwrap();
        let samples = synthetic_samples(1, 5, &config);
        let stats = DatasetStats {
            mean: vec![0.5, 0.5, 0.5],
            std: vec![0.25, 0.25, 0.25],
        };
        let input = input_tensor(&samples[0].pixels, &config, &stats).unwrap();
        let (_, _, _, g2_l1) = joint_sample_grads(
            &params,
            &input,
            samples[0].steering,
            samples[0].ldl,
            JointMode::Joint { lambda1: 1.0 },
        )
        .unwrap();
        let (_, _, _, g2_l2) = joint_sample_grads(
            &params,
            &input,
            samples[0].steering,
            samples[0].ldl,
            JointMode::Joint { lambda1: 2.0 },
        )
        .unwrap();
        for (a, b) in g2_l1.layers.iter().zip(&g2_l2.layers) {
            for (x, y) in a.d_weight.data().iter().zip(b.d_weight.data()) {
                assert_eq!(2.0 * x, *y, "f2 gradient must double exactly");
            }
            for (x, y) in a.d_bias.data().iter().zip(b.d_bias.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn lambda_zero_equals_steer_only_gradients() {
        let config = tiny_config();
        let params = NetworkParams::<f32>::init(config, 4).unwrap();
        let samples = synthetic_samples(1, 6, &config);
        let stats = DatasetStats {
            mean: vec![0.5, 0.5, 0.5],
            std: vec![0.25, 0.25, 0.25],
        };
        let input = input_tensor(&samples[0].pixels, &config, &stats).unwrap();
        let (l0, c0, f10, _) = joint_sample_grads(
            &params,
            &input,
            samples[0].steering,
            samples[0].ldl,
            JointMode::Joint { lambda1: 0.0 },
        )
        .unwrap();
        let (l1, c1, f11, _) = joint_sample_grads(
            &params,
            &input,
            samples[0].steering,
            samples[0].ldl,
            JointMode::SteerOnly,
        )
        .unwrap();
        assert_eq!(l0, l1);
        assert_eq!(c0, c1);
        assert_eq!(f10, f11);
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let config = tiny_config();
        let samples = synthetic_samples(120, 7, &config);
        let opts = TrainOptions {
            cycles: 4,
            batch_size: 16,
            val_fraction: 0.1,
            hyper: AdamHyper {
                gamma: 3e-3,
                ..AdamHyper::default()
            },
            seed: 42,
        };
        let a = train_full_network(&samples, config, JointMode::Joint { lambda1: 1.0 }, &opts)
            .unwrap();
        let b = train_full_network(&samples, config, JointMode::Joint { lambda1: 1.0 }, &opts)
            .unwrap();
        assert_eq!(
            params_fingerprint(&a.params),
            params_fingerprint(&b.params),
            "identical seeds must give identical parameters"
        );
        assert_eq!(a.log, b.log);
        let first = a.log.rows.first().unwrap().train_loss;
        let best_row = &a.log.rows[a.log.best_cycle - 1];
        assert!(
            best_row.train_loss < first,
            "train loss should improve from {first} (best cycle {})",
            a.log.best_cycle
        );
        // Selection rule: best cycle has the minimum validation loss.
        let min_val = a
            .log
            .rows
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best_row.val_loss, min_val);
    }

    #[test]
    fn forced_zero_gate_matches_plain_training_bitwise() {
        let config = tiny_config();
        let source = NetworkParams::<f32>::init(config, 9).unwrap();
        let samples = synthetic_samples(80, 11, &config);
        let stats = DatasetStats {
            mean: vec![0.5, 0.5, 0.5],
            std: vec![0.25, 0.25, 0.25],
        };
        let data = precompute_target_features(&source, &samples, &stats).unwrap();
        let opts = TrainOptions {
            cycles: 3,
            batch_size: 16,
            val_fraction: 0.1,
            hyper: AdamHyper {
                gamma: 1e-3,
                ..AdamHyper::default()
            },
            seed: 21,
        };
        let forced = train_target_head(&source, &data, GateMode::Forced(0.0), &opts).unwrap();
        let plain = train_target_head(&source, &data, GateMode::Plain, &opts).unwrap();
        assert_eq!(forced.head, plain.head, "gate 0 must reduce to plain MSE");
        for (a, b) in forced.log.rows.iter().zip(&plain.log.rows) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.val_loss, b.val_loss);
        }
    }

    #[test]
    fn target_training_never_touches_frozen_tensors() {
        let config = tiny_config();
        let source = NetworkParams::<f32>::init(config, 13).unwrap();
        let fp_before = params_fingerprint(&source);
        let samples = synthetic_samples(60, 15, &config);
        let stats = DatasetStats {
            mean: vec![0.5, 0.5, 0.5],
            std: vec![0.25, 0.25, 0.25],
        };
        let data = precompute_target_features(&source, &samples, &stats).unwrap();
        let opts = TrainOptions {
            cycles: 2,
            batch_size: 16,
            val_fraction: 0.1,
            hyper: AdamHyper::default(),
            seed: 17,
        };
        let out = train_target_head(
            &source,
            &data,
            GateMode::Logistic(GateParams::desk_training()),
            &opts,
        )
        .unwrap();
        assert_eq!(params_fingerprint(&source), fp_before);
        assert_ne!(out.head, source.heads[HEAD_TARGET_STEER]);
        // Gate logging present and strictly inside (0, 1).
        for r in &out.log.rows {
            let g = r.mean_gate.unwrap();
            assert!(g > 0.0 && g < 1.0);
        }
    }
}
