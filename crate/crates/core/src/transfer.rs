//! Domain transfer machinery: the logistic trust gate, the joint source
//! loss, the gated target loss, command blending, target-frame crop
//! preprocessing and the crop-alignment search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::model::{
    forward_head, forward_source_pair, head_forward, ImageSpec, NetworkParams,
    HEAD_SOURCE_LDL, HEAD_SOURCE_STEER, HEAD_TARGET_STEER,
};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;
use crate::data::DatasetStats;

/// Logistic gate `phi(x) = 1 / (1 + exp(a * (x - b)))`.
///
/// With `a < 0` the gate increases in `x`; callers feed `|ldl|`, so the
/// gate shifts trust toward the source head as the car strays from the
/// lane center. The training and driving stages each carry their own
/// `(a, b)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub a: f64,
    pub b: f64,
}

impl GateParams {
    /// Default training-stage gate: slope -12, midpoint 1/3.
    pub fn desk_training() -> Self {
        GateParams {
            a: -12.0,
            b: 1.0 / 3.0,
        }
    }

    /// Default driving-stage gate: slope -8, midpoint 0.5. Weaker than
    /// the training gate everywhere on [0, 1] (they meet at x = 0).
    pub fn desk_driving() -> Self {
        GateParams { a: -8.0, b: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a >= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "gate slope a must be negative so the gate increases, got {}",
                self.a
            )));
        }
        Ok(())
    }
}

/// Gate value in (0, 1). `x` is expected non-negative (callers pass |ldl|).
pub fn gate<T: Scalar>(x: T, g: &GateParams) -> T {
    debug_assert!(x >= T::zero());
    let a = cast::<T>(g.a);
    let b = cast::<T>(g.b);
    T::one() / (T::one() + (a * (x - b)).exp())
}

/// Blended steering command: `(1 - phi(|ldl|)) * y_target + phi(|ldl|) * y_source`.
pub fn blend_command<T: Scalar>(y_target: T, y_source: T, ldl_source: T, g: &GateParams) -> T {
    let w = gate(ldl_source.abs(), g);
    (T::one() - w) * y_target + w * y_source
}

/// Per-sample gated target loss:
/// `(1 - w) * (y_t - pred)^2 + w * (y_src - pred)^2`.
#[inline]
pub fn gated_sample_loss(pred: f32, y_t: f32, y_src: f32, w: f32) -> f32 {
    let d_label = y_t - pred;
    let d_distill = y_src - pred;
    (1.0 - w) * (d_label * d_label) + w * (d_distill * d_distill)
}

/// Derivative of [`gated_sample_loss`] w.r.t. `pred`.
#[inline]
pub fn gated_sample_dloss(pred: f32, y_t: f32, y_src: f32, w: f32) -> f32 {
    2.0 * ((1.0 - w) * (pred - y_t) + w * (pred - y_src))
}

/// A preprocessed sample as the losses see it.
#[derive(Debug, Clone)]
pub struct LabeledInput {
    pub input: Tensor<f32>,
    pub steering: f32,
    pub ldl: f32,
    pub domain: Domain,
}

/// Joint source loss: steering MSE plus `lambda1` times LDL MSE,
/// batch-averaged. Rejects target-tagged samples.
pub fn loss_source(
    params: &NetworkParams<f32>,
    batch: &[LabeledInput],
    lambda1: f32,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss_source batch".into()));
    }
    let mut acc = 0.0f32;
    for sample in batch {
        if sample.domain != Domain::Source {
            return Err(Error::DomainMismatch {
                expected: "source".into(),
                got: format!("{:?}", sample.domain).to_lowercase(),
            });
        }
        let (y_hat, l_hat) = forward_source_pair(params, &sample.input)?;
        let dy = sample.steering - y_hat;
        let dl = sample.ldl - l_hat;
        acc += dy * dy + lambda1 * (dl * dl);
    }
    Ok(acc / batch.len() as f32)
}

/// Plain steering MSE (the baseline objective), batch-averaged, on the
/// given head.
pub fn loss_baseline(
    params: &NetworkParams<f32>,
    head: usize,
    batch: &[(Tensor<f32>, f32)],
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss_baseline batch".into()));
    }
    let mut acc = 0.0f32;
    for (input, y) in batch {
        let p = forward_head(params, input, head)?;
        let d = *y - p;
        acc += d * d;
    }
    Ok(acc / batch.len() as f32)
}

/// Gated target loss over a batch, evaluated literally: the frozen source
/// network produces the distillation targets, the target head the
/// predictions. `gate_override` replaces the gate output when set (the
/// hard-0/hard-1 reduction cases).
pub fn loss_target_gated(
    source_params: &NetworkParams<f32>,
    batch: &[(Tensor<f32>, f32)],
    g: &GateParams,
    gate_override: Option<f32>,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss_target_gated batch".into()));
    }
    let mut acc = 0.0f32;
    for (input, y_t) in batch {
        let (conv5, _) = crate::model::conv_stack_forward(source_params, input)?;
        let flat = conv5.data();
        let y_src = head_forward(&source_params.heads[HEAD_SOURCE_STEER], flat)?.output();
        let l_src = head_forward(&source_params.heads[HEAD_SOURCE_LDL], flat)?.output();
        let pred = head_forward(&source_params.heads[HEAD_TARGET_STEER], flat)?.output();
        let w = gate_override.unwrap_or_else(|| gate(l_src.abs(), g));
        acc += gated_sample_loss(pred, *y_t, y_src, w);
    }
    Ok(acc / batch.len() as f32)
}

/// Crop window for target-domain frames: the bottom half of the frame,
/// inset `delta_a` pixels from each side and `delta_b` pixels from the
/// top of the bottom half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub delta_a: usize,
    pub delta_b: usize,
}

impl CropRect {
    pub const IDENTITY: CropRect = CropRect {
        delta_a: 0,
        delta_b: 0,
    };

    /// Row where the bottom half starts.
    pub fn base_row(frame_height: usize) -> usize {
        frame_height / 2
    }

    /// `(x0, y0, width, height)` of the crop within the frame.
    pub fn region(&self, frame_width: usize, frame_height: usize) -> Result<(usize, usize, usize, usize)> {
        let base = Self::base_row(frame_height);
        let y0 = base + self.delta_b;
        let x0 = self.delta_a;
        if y0 >= frame_height || 2 * self.delta_a >= frame_width {
            return Err(Error::InvalidParameter(format!(
                "crop ({}, {}) leaves an empty region in a {}x{} frame",
                self.delta_a, self.delta_b, frame_width, frame_height
            )));
        }
        Ok((x0, y0, frame_width - 2 * self.delta_a, frame_height - y0))
    }
}

/// Crop and bilinearly resize to the network input size; output in [0, 1].
pub fn crop_resize(image: &Image, rect: &CropRect, out: &ImageSpec) -> Result<Tensor<f32>> {
    let (x0, y0, cw, ch) = rect.region(image.width, image.height)?;
    let (ow, oh) = (out.width, out.height);
    if out.channels != 3 {
        return Err(Error::InvalidParameter(
            "crop_resize expects 3-channel output".into(),
        ));
    }
    let sx = cw as f64 / ow as f64;
    let sy = ch as f64 / oh as f64;
    let mut data = vec![0.0f32; oh * ow * 3];
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, ch as f64 - 1.0);
        let y_lo = fy.floor() as usize;
        let y_hi = (y_lo + 1).min(ch - 1);
        let wy = fy - y_lo as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, cw as f64 - 1.0);
            let x_lo = fx.floor() as usize;
            let x_hi = (x_lo + 1).min(cw - 1);
            let wx = fx - x_lo as f64;
            let p00 = image.get(x0 + x_lo, y0 + y_lo);
            let p01 = image.get(x0 + x_hi, y0 + y_lo);
            let p10 = image.get(x0 + x_lo, y0 + y_hi);
            let p11 = image.get(x0 + x_hi, y0 + y_hi);
            let base = (oy * ow + ox) * 3;
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - wx) + p01[c] as f64 * wx;
                let bot = p10[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                data[base + c] = ((top * (1.0 - wy) + bot * wy) / 255.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[oh, ow, 3], data)
}

/// Crop, resize and normalize with the given statistics: the full
/// target-frame preprocessing path.
pub fn preprocess_crop(
    image: &Image,
    rect: &CropRect,
    out: &ImageSpec,
    stats: &DatasetStats,
) -> Result<Tensor<f32>> {
    let unit = crop_resize(image, rect, out)?;
    crate::data::apply_normalization(&unit, stats)
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            context: "pearson".into(),
            expected: format!("{}", xs.len()),
            got: format!("{}", ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("pearson needs at least 2 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant series has no defined correlation".into(),
        ));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Inset grid for the crop-alignment search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropGrid {
    pub da: Vec<usize>,
    pub db: Vec<usize>,
}

impl CropGrid {
    /// Build from fractional bounds/steps: `da` over frame width,
    /// `db` over the bottom-half height.
    pub fn from_fractions(
        frame_w: usize,
        frame_h: usize,
        da_max: f64,
        da_step: f64,
        db_max: f64,
        db_step: f64,
    ) -> Self {
        let half_h = frame_h / 2;
        let seq = |extent: usize, max: f64, step: f64| -> Vec<usize> {
            let mut vals = Vec::new();
            let mut k = 0;
            loop {
                let frac = step * k as f64;
                if frac > max + 1e-9 {
                    break;
                }
                let px = (extent as f64 * frac).round() as usize;
                if vals.last() != Some(&px) {
                    vals.push(px);
                }
                k += 1;
            }
            vals
        };
        CropGrid {
            da: seq(frame_w, da_max, da_step),
            db: seq(half_h, db_max, db_step),
        }
    }

    /// Grid spacing in pixels (largest neighbor gap), per axis.
    pub fn step_px(&self) -> (usize, usize) {
        let gap = |v: &[usize]| {
            v.windows(2)
                .map(|w| w[1] - w[0])
                .max()
                .unwrap_or(1)
        };
        (gap(&self.da), gap(&self.db))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignCell {
    pub delta_a: usize,
    pub delta_b: usize,
    /// None when the correlation is undefined in this cell.
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignResult {
    pub best: CropRect,
    pub best_r: f64,
    pub cells: Vec<AlignCell>,
}

/// Evaluate the source network's LDL prediction against ground truth over
/// every grid cell; return the argmax cell (ties broken toward smaller
/// `delta_b`, then `delta_a`) and the full grid.
///
/// `frames` pairs each target frame with its ground-truth LDL. Cells run
/// in parallel; the argmax reduction is a fixed-order scan.
pub fn align_crop_search(
    source_params: &NetworkParams<f32>,
    stats: &DatasetStats,
    frames: &[(Image, f64)],
    grid: &CropGrid,
    min_frames: usize,
) -> Result<AlignResult> {
    if frames.len() < min_frames {
        return Err(Error::InvalidParameter(format!(
            "crop alignment needs at least {min_frames} labeled frames, got {}",
            frames.len()
        )));
    }
    let out = source_params.config.input;
    let truths: Vec<f64> = frames.iter().map(|(_, l)| *l).collect();

    let mut coords = Vec::with_capacity(grid.da.len() * grid.db.len());
    for &db in &grid.db {
        for &da in &grid.da {
            coords.push((da, db));
        }
    }

    let cells: Result<Vec<AlignCell>> = coords
        .par_iter()
        .map(|&(da, db)| {
            let rect = CropRect {
                delta_a: da,
                delta_b: db,
            };
            let mut preds = Vec::with_capacity(frames.len());
            for (img, _) in frames {
                let input = preprocess_crop(img, &rect, &out, stats)?;
                let l_hat = forward_head(source_params, &input, HEAD_SOURCE_LDL)?;
                preds.push(l_hat as f64);
            }
            let r = match pearson(&preds, &truths) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AlignCell {
                delta_a: da,
                delta_b: db,
                r,
            })
        })
        .collect();
    let cells = cells?;

    let mut best: Option<(usize, f64)> = None;
    for (i, cell) in cells.iter().enumerate() {
        if let Some(r) = cell.r {
            if best.map(|(_, br)| r > br).unwrap_or(true) {
                best = Some((i, r));
            }
        }
    }
    let (bi, best_r) = best.ok_or_else(|| {
        Error::UndefinedCorrelation("every grid cell yielded an undefined correlation".into())
    })?;
    Ok(AlignResult {
        best: CropRect {
            delta_a: cells[bi].delta_a,
            delta_b: cells[bi].delta_b,
        },
        best_r,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_midpoint_is_half() {
        for g in [GateParams::desk_training(), GateParams::desk_driving()] {
            let v: f64 = gate(g.b, &g);
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_at_zero_matches_hand_value() {
        // a=-12, b=1/3: phi(0) = 1/(1+e^4)
        let g = GateParams::desk_training();
        let v: f64 = gate(0.0, &g);
        let expected = 1.0 / (1.0 + 4.0f64.exp());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.01799).abs() < 1e-5);
    }

    #[test]
    fn gate_is_strictly_increasing_and_bounded() {
        let g = GateParams::desk_training();
        let mut prev = -1.0f64;
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let v = gate(x, &g);
            assert!(v > 0.0 && v < 1.0);
            assert!(v > prev, "not increasing at x={x}");
            prev = v;
        }
    }

    #[test]
    fn driving_gate_never_exceeds_training_gate_on_unit_interval() {
        let gt = GateParams::desk_training();
        let gd = GateParams::desk_driving();
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            assert!(gate::<f64>(x, &gd) <= gate::<f64>(x, &gt), "violated at x={x}");
        }
    }

    #[test]
    fn positive_slope_is_rejected() {
        assert!(GateParams { a: 1.0, b: 0.5 }.validate().is_err());
        assert!(GateParams::desk_training().validate().is_ok());
    }

    #[test]
    fn blend_endpoints_and_hull() {
        let g = GateParams::desk_driving();
        // phi ~ 0 deep in the lane center: command is mostly the target
        // head's (phi(0) = 1/(1+e^4) ~ 0.018).
        let share: f64 = blend_command(0.2, -0.4, 0.0, &g);
        assert!((share - 0.2).abs() < 0.02);
        // phi ~ 1 far out: command is the source head's.
        let share: f64 = blend_command(0.2, -0.4, 1.0, &g);
        assert!((share - -0.4).abs() < 0.05);
        // Always inside the hull of the two commands.
        for i in 0..=100 {
            let l = i as f64 / 100.0;
            let s = blend_command(0.2, -0.4, l, &g);
            assert!(s <= 0.2 + 1e-12 && s >= -0.4 - 1e-12);
        }
    }

    #[test]
    fn blend_midpoint_hand_value() {
        // w = 0.5 exactly at x = b.
        let g = GateParams { a: -8.0, b: 0.5 };
        let s: f64 = blend_command(0.2, -0.4, 0.5, &g);
        assert!((s - -0.1).abs() < 1e-12);
    }

    #[test]
    fn gated_loss_hand_case_and_reductions() {
        // w=0.5, y_t=0.2, y_src=-0.4, pred=0: 0.5*0.04 + 0.5*0.16 = 0.10
        let l = gated_sample_loss(0.0, 0.2, -0.4, 0.5);
        assert!((l - 0.10).abs() < 1e-7);
        // Gate forced to 0 reduces to the plain label MSE, bit for bit.
        let (pred, y_t, y_src) = (0.31f32, -0.12, 0.77);
        let plain = (y_t - pred) * (y_t - pred);
        assert_eq!(gated_sample_loss(pred, y_t, y_src, 0.0), plain);
        // Gate forced to 1 is pure distillation.
        let distill = (y_src - pred) * (y_src - pred);
        assert_eq!(gated_sample_loss(pred, y_t, y_src, 1.0), distill);
    }

    #[test]
    fn pearson_reference_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);

        // Brute-force covariance formula oracle.
        let ys = [1.0, 2.0, 2.0, 4.0];
        let n = 4.0;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let expected = cov / (vx * vy).sqrt();
        assert_eq!(pearson(&xs, &ys).unwrap(), expected);
    }

    #[test]
    fn pearson_rejects_constant_series() {
        let xs = [1.0, 1.0, 1.0];
        let ys = [1.0, 2.0, 3.0];
        assert!(matches!(
            pearson(&xs, &ys).unwrap_err(),
            Error::UndefinedCorrelation(_)
        ));
    }

    #[test]
    fn crop_region_arithmetic() {
        let rect = CropRect {
            delta_a: 20,
            delta_b: 14,
        };
        let (x0, y0, w, h) = rect.region(256, 144).unwrap();
        assert_eq!((x0, y0, w, h), (20, 86, 216, 58));
        // Empty crops error.
        assert!(CropRect {
            delta_a: 128,
            delta_b: 0
        }
        .region(256, 144)
        .is_err());
        assert!(CropRect {
            delta_a: 0,
            delta_b: 72
        }
        .region(256, 144)
        .is_err());
    }

    #[test]
    fn solid_color_survives_crop_resize() {
        let mut img = Image::new(64, 48);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&[120, 60, 200]);
        }
        let out = ImageSpec {
            height: 20,
            width: 30,
            channels: 3,
        };
        let t = crop_resize(&img, &CropRect::IDENTITY, &out).unwrap();
        for ch in t.data().chunks_exact(3) {
            assert!((ch[0] - 120.0 / 255.0).abs() < 1e-6);
            assert!((ch[1] - 60.0 / 255.0).abs() < 1e-6);
            assert!((ch[2] - 200.0 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_resize_matches_bilinear_oracle() {
        use rand_chacha::rand_core::Rng;
        let mut rng = crate::util::rng_from(77);
        let mut img = Image::new(80, 60);
        for b in img.data.iter_mut() {
            *b = (rng.next_u32() & 0xff) as u8;
        }
        let rect = CropRect {
            delta_a: 7,
            delta_b: 5,
        };
        let out = ImageSpec {
            height: 24,
            width: 40,
            channels: 3,
        };
        let got = crop_resize(&img, &rect, &out).unwrap();

        // Independent oracle, written against the definition.
        let (x0, y0, cw, ch) = (7usize, 35usize, 66usize, 25usize);
        for oy in 0..24 {
            for ox in 0..40 {
                for c in 0..3 {
                    let fy = (((oy as f64 + 0.5) * (ch as f64 / 24.0)) - 0.5)
                        .clamp(0.0, ch as f64 - 1.0);
                    let fx = (((ox as f64 + 0.5) * (cw as f64 / 40.0)) - 0.5)
                        .clamp(0.0, cw as f64 - 1.0);
                    let (yl, xl) = (fy.floor() as usize, fx.floor() as usize);
                    let (yh, xh) = ((yl + 1).min(ch - 1), (xl + 1).min(cw - 1));
                    let (wy, wx) = (fy - yl as f64, fx - xl as f64);
                    let sample = |xx: usize, yy: usize| -> f64 {
                        img.get(x0 + xx, y0 + yy)[c] as f64
                    };
                    let expected = ((sample(xl, yl) * (1.0 - wx) + sample(xh, yl) * wx)
                        * (1.0 - wy)
                        + (sample(xl, yh) * (1.0 - wx) + sample(xh, yh) * wx) * wy)
                        / 255.0;
                    let got_v = got.at(&[oy, ox, c]) as f64;
                    assert!(
                        (got_v - expected).abs() < 1e-6,
                        "({ox},{oy},{c}): {got_v} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn grid_fractions_round_and_dedup() {
        let grid = CropGrid::from_fractions(256, 144, 0.25, 0.02, 0.40, 0.02);
        assert_eq!(grid.da[0], 0);
        assert_eq!(grid.db[0], 0);
        // 12 steps of 2% of 256 px: round(0.24 * 256) = 61.
        assert_eq!(*grid.da.last().unwrap(), 61);
        assert_eq!(*grid.db.last().unwrap(), 29);
        assert!(grid.da.windows(2).all(|w| w[1] > w[0]));
        assert!(grid.db.windows(2).all(|w| w[1] > w[0]));
    }
}
