//! RMSprop with a separate momentum buffer and decoupled weight decay.
//!
//! Per entry, with gradient `g`:
//!
//! ```text
//! acc ← ρ·acc + (1−ρ)·g²
//! buf ← μ·buf + g / (√acc + ε)
//! θ   ← θ − lr·buf − lr·wd·θ
//! ```

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Smoothing constant `ρ` of the squared-gradient average.
    pub rho: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            rho: 0.99,
            momentum: 0.9,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.rho)
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Squared-gradient averages, one per parameter tensor.
    pub accumulators: Vec<Tensor>,
    pub momentum_buffers: Vec<Tensor>,
    pub steps: u64,
}

impl OptimizerState {
    /// Zeroed state for parameters shaped like `params`.
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(OptimizerState {
            config,
            accumulators: zeros.clone(),
            momentum_buffers: zeros,
            steps: 0,
        })
    }

    /// Applies one update in place. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.accumulators.len() || grads.len() != params.len() {
            return Err(Error::shape("optimizer step", &[self.accumulators.len()], &[params.len(), grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.accumulators[i].shape() || g.shape() != p.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
            if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at flat index {j} is {} (step {})",
                    g.data()[j],
                    self.steps
                )));
            }
        }
        let c = self.config;
        for ((p, g), (acc, buf)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.accumulators.iter_mut().zip(self.momentum_buffers.iter_mut()))
        {
            let (p, acc, buf) = (p.data_mut(), acc.data_mut(), buf.data_mut());
            for k in 0..p.len() {
                let gk = g.data()[k];
                acc[k] = c.rho * acc[k] + (1.0 - c.rho) * gk * gk;
                buf[k] = c.momentum * buf[k] + gk / (libm::sqrt(acc[k]) + c.eps);
                p[k] -= c.learning_rate * buf[k] + c.learning_rate * c.weight_decay * p[k];
            }
        }
        self.steps += 1;
        for (i, p) in params.iter().enumerate() {
            p.ensure_finite(&format!("parameter {i} after step {}", self.steps))?;
        }
        Ok(())
    }
}
