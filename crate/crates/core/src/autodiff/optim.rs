use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first step
/// and must keep a fixed correspondence with the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Array2<T>], &[Array2<T>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from stored moments (checkpoint resume).
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        m: Vec<Array2<T>>,
        v: Vec<Array2<T>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.dim() != b.dim()) {
            return Err(Error::Contract("inconsistent Adam moment buffers".into()));
        }
        Ok(Self { config, step, m, v })
    }

    /// One update of every trainable tensor in `params` using its stored grad.
    ///
    /// Non-trainable tensors are skipped. A trainable tensor without a grad is
    /// a contract error and leaves every parameter untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
        if let Some(i) = params
            .iter()
            .position(|p| p.requires_grad() && p.grad().is_none())
        {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.dim() != p.shape())
        {
            return Err(Error::Contract(
                "parameter list changed between optimizer steps".into(),
            ));
        }

        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            p.update(|value, grad| {
                Zip::from(value)
                    .and(grad)
                    .and(&mut *m)
                    .and(&mut *v)
                    .for_each(|w, &g, m, v| {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
            })?;
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate. Steps past `total` stay at `lr_min`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let total = total.max(1);
    if step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
