use serde::{Deserialize, Serialize};

use super::params::Layout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-4,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

/// AdamW with linear warmup and decoupled weight decay on matrices.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    decay_mask: Vec<bool>,
    step: usize,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, layout: &Layout) -> Self {
        let mut decay_mask = vec![false; layout.total];
        for t in &layout.tensors {
            if t.decay {
                decay_mask[t.range.clone()].fill(true);
            }
        }
        AdamW {
            config,
            m: vec![0.0; layout.total],
            v: vec![0.0; layout.total],
            decay_mask,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.config.warmup_steps == 0 {
            self.config.lr
        } else {
            self.config.lr * (step as f64 / self.config.warmup_steps as f64).min(1.0)
        }
    }

    /// Clips `grads` in place and applies one update. Returns the pre-clip
    /// global gradient norm.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64]) -> f64 {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let s = self.config.grad_clip / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        self.step += 1;
        let c = &self.config;
        let lr = self.learning_rate(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut update = mhat / (vhat.sqrt() + c.eps);
            if self.decay_mask[i] {
                update += c.weight_decay * params[i];
            }
            params[i] -= lr * update;
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn warmup_is_linear() {
        let cfg = ModelConfig {
            hidden: 4,
            heads: 1,
            ffn_hidden: 4,
            ..ModelConfig::new(3)
        };
        let opt = AdamW::new(OptimizerConfig::default(), &Layout::new(&cfg));
        assert!((opt.learning_rate(100) - 1.5e-4).abs() < 1e-15);
        assert_eq!(opt.learning_rate(200), 3e-4);
        assert_eq!(opt.learning_rate(5000), 3e-4);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let cfg = ModelConfig {
            hidden: 4,
            heads: 1,
            ffn_hidden: 4,
            encoder_layers: 0,
            decoder_layers: 0,
            ..ModelConfig::new(1)
        };
        let layout = Layout::new(&cfg);
        let mut opt = AdamW::new(OptimizerConfig::default(), &layout);
        let mut params = vec![0.0; layout.total];
        let mut grads = vec![3.0; layout.total];
        let norm = opt.step(&mut params, &mut grads);
        assert!((norm - 3.0 * (layout.total as f64).sqrt()).abs() < 1e-9);
        let clipped: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
