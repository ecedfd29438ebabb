use serde::{Deserialize, Serialize};

use super::{ParamSet, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate factor applied at each epoch boundary.
    pub lr_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_decay: 0.95,
            clip_norm: 0.0,
        }
    }
}

/// Adam with decoupled weight decay and per-epoch exponential lr decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| p.ids().map(|id| vec![0.0; p.get(id).numel()]).collect();
        Self {
            lr: config.lr,
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.config.lr_decay;
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adamw",
                reason: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(TensorError::NonFinite { op: "adamw" });
        }
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let lr = self.lr;
        for ((id, g), (m, v)) in params.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
        Ok(norm)
    }
}
