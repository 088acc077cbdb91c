//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            gamma: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor first/second moment buffers plus the shared step counter.
pub struct AdamState<T> {
    pub hyper: AdamHyper,
    step: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Moment slots are allocated congruent with `params`, in order.
    pub fn new(hyper: AdamHyper, params: &[&Tensor<T>]) -> Self {
        AdamState {
            hyper,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the full parameter list. `names` are used only for
    /// error reporting; slot order must match the order given to `new`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        names: &[&str],
    ) -> Result<()> {
        assert_eq!(params.len(), self.first_moment.len(), "adam slot count");
        assert_eq!(grads.len(), params.len(), "adam grad count");
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("adam gradient for '{name}'"),
                    expected: format!("{:?}", p.shape()),
                    got: format!("{:?}", g.shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: (*name).to_string(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let beta1 = cast::<T>(self.hyper.beta1);
        let beta2 = cast::<T>(self.hyper.beta2);
        let one = T::one();
        let corr1 = one - beta1.powi(t);
        let corr2 = one - beta2.powi(t);
        let gamma = cast::<T>(self.hyper.gamma);
        let eps = cast::<T>(self.hyper.eps);

        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[slot].data_mut();
            let v = self.second_moment[slot].data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                m[i] = beta1 * m[i] + (one - beta1) * gd[i];
                v[i] = beta2 * v[i] + (one - beta2) * gd[i] * gd[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                pd[i] = pd[i] - gamma * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
