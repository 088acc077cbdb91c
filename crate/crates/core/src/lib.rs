//! Lane-keeping with domain transfer, end to end and self-contained.
//!
//! The crate trains a three-head convolutional network (shared conv stack,
//! one steering head and one lane-departure head for the source domain,
//! one steering head for the target domain) on frames from a deterministic
//! 2D driving simulator, transfers it to a differently rendered target
//! domain through a gated distillation loss, and evaluates closed-loop
//! driving with yaw-rate-variance and distance-to-ground-truth metrics.
//!
//! Everything is built from scratch on top of a small dense-tensor core:
//! no external ML dependency, bit-deterministic given a master seed.
//!
//! # Layout
//!
//! - [`tensor`], [`nn`]: dense tensors plus the five layer kinds the
//!   network needs (conv2d, fully connected, relu, tanh, LRN), MSE loss,
//!   Adam, Xavier init, and a finite-difference gradient checker.
//! - [`model`]: the three-head network, checkpoint format, activation maps.
//! - [`transfer`]: gate function, joint source loss, gated target loss,
//!   command blending, crop preprocessing and the crop-alignment search.
//! - [`sim`]: procedural tracks, kinematic bicycle, perspective renderer,
//!   pure-pursuit expert and speed controller.
//! - [`data`]: expert/recovery collection, steering-histogram balancing,
//!   normalization statistics, train/val split, binary sample container.
//! - [`eval`]: closed-loop driving of trained policies, VYR and D2GT,
//!   report tables.
//! - [`pipeline`]: seeded run configuration and the staged commands the
//!   CLI exposes.
//!
//! Math that benefits from being checked in double precision (the network
//! core, the gate, the metrics) is generic over [`scalar::Scalar`]; the
//! shipped pipeline runs in `f32`, oracles and geometry in `f64`.

pub mod data;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Scalar type the shipped pipeline trains and drives with.
pub type PipelineScalar = f32;
/// Scalar type used by oracles, gradient checks and trajectory geometry.
pub type CheckScalar = f64;

/// Pipeline-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Pipeline-precision network parameters.
pub type NetworkParams32 = model::NetworkParams<f32>;
/// Verification-precision network parameters.
pub type NetworkParams64 = model::NetworkParams<f64>;
