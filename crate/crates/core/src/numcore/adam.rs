use serde::{Deserialize, Serialize};

use crate::error::{Result, SgcnError};

use super::real::Real;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Result<Self> {
        if !(config.lr >= 0.0 && config.eps > 0.0)
            || !(0.0..1.0).contains(&config.beta1)
            || !(0.0..1.0).contains(&config.beta2)
        {
            return Err(SgcnError::invalid(format!("adam hyper-parameters {config:?}")));
        }
        let sizes: Vec<usize> = params.into_iter().map(|p| p.len()).collect();
        Ok(AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            config,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected ADAM update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(SgcnError::shape(format!(
                "adam state tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(SgcnError::shape(format!(
                    "adam tensor {i}: {} values, state has {}",
                    p.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - beta1), T::from_f64_lossy(1.0 - beta2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(eps);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(|g| g.to_vec());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                data[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
