//! Local response normalization across channels (inter-channel variant).
//!
//! For channel `c` at one spatial position:
//! `out_c = in_c / (k + (alpha/n) * sum_{c' in win(c)} in_{c'}^2)^beta`
//! where `win(c)` spans `n` channels centered at `c`, clipped at the
//! channel bounds. The divisor `n` stays fixed even when the window clips.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

use super::LrnParams;

/// Forward caches the raw denominators so backward avoids recomputing
/// the pow.
pub struct LrnCache<T> {
    /// `k + (alpha/n) * S_c` per element.
    denom: Vec<T>,
    /// `denom^(-beta)` per element.
    denom_pow: Vec<T>,
}

#[inline]
fn pow_neg_beta<T: Scalar>(d: T, beta: T) -> T {
    // beta = 0.75 dominates in practice; d^(3/4) = sqrt(d) * sqrt(sqrt(d)).
    if beta == cast::<T>(0.75) {
        let s = d.sqrt();
        T::one() / (s * s.sqrt())
    } else {
        d.powf(-beta)
    }
}

pub fn lrn_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &LrnParams,
) -> Result<(Tensor<T>, LrnCache<T>)> {
    if params.n < 1 {
        return Err(Error::InvalidParameter("lrn window n must be >= 1".into()));
    }
    let shape = input.shape();
    if shape.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "lrn input".into(),
            expected: "tensor with a channel axis".into(),
            got: "rank-0".into(),
        });
    }
    let channels = *shape.last().unwrap();
    let positions = input.len() / channels;
    let half = params.n / 2;
    let k = cast::<T>(params.k);
    let alpha_over_n = cast::<T>(params.alpha / params.n as f64);
    let beta = cast::<T>(params.beta);

    let x = input.data();
    let mut out = Tensor::zeros(shape);
    let o = out.data_mut();
    let mut denom = vec![T::zero(); x.len()];
    let mut denom_pow = vec![T::zero(); x.len()];

    for p in 0..positions {
        let base = p * channels;
        for c in 0..channels {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(channels - 1);
            let mut s = T::zero();
            for cc in lo..=hi {
                let v = x[base + cc];
                s += v * v;
            }
            let d = k + alpha_over_n * s;
            let dp = pow_neg_beta(d, beta);
            denom[base + c] = d;
            denom_pow[base + c] = dp;
            o[base + c] = x[base + c] * dp;
        }
    }
    Ok((out, LrnCache { denom, denom_pow }))
}

pub fn lrn_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &LrnParams,
    cache: &LrnCache<T>,
    d_out: &Tensor<T>,
) -> Tensor<T> {
    debug_assert_eq!(input.shape(), d_out.shape());
    let shape = input.shape();
    let channels = *shape.last().unwrap();
    let positions = input.len() / channels;
    let half = params.n / 2;
    let beta = cast::<T>(params.beta);
    let two_alpha_beta_over_n = cast::<T>(2.0 * params.alpha * params.beta / params.n as f64);

    let x = input.data();
    let g = d_out.data();
    let mut d_in = Tensor::zeros(shape);
    let di = d_in.data_mut();
    let _ = beta;

    let mut q = vec![T::zero(); channels];
    for p in 0..positions {
        let base = p * channels;
        // q_c = g_c * x_c * denom^(-beta-1)
        for c in 0..channels {
            let i = base + c;
            q[c] = g[i] * x[i] * (cache.denom_pow[i] / cache.denom[i]);
        }
        for j in 0..channels {
            let i = base + j;
            let lo = j.saturating_sub(half);
            let hi = (j + half).min(channels - 1);
            let mut s = T::zero();
            for c in lo..=hi {
                s += q[c];
            }
            di[i] = g[i] * cache.denom_pow[i] - two_alpha_beta_over_n * x[i] * s;
        }
    }
    d_in
}
