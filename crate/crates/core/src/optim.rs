use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: usize,
    pub m: ModelParams<Tensor<S>>,
    pub v: ModelParams<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(like: &ModelParams<Tensor<S>>) -> Self {
        Self {
            step: 0,
            m: like.map(|t| Tensor::zeros(t.shape())),
            v: like.map(|t| Tensor::zeros(t.shape())),
        }
    }

    /// One update in place. Returns the pre-clip global gradient norm.
    pub fn update(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ModelParams<Tensor<S>>,
        grads: &ModelParams<Tensor<S>>,
    ) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&x| {
                let x = x.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(cfg.beta1), S::from_f64_lossy(cfg.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let step_size = S::from_f64_lossy(lr / bc1);
        let bc2_sqrt = S::from_f64_lossy(bc2.sqrt());
        let eps = S::from_f64_lossy(cfg.eps);
        let clip = S::from_f64_lossy(clip);
        let ms = self.m.iter_mut();
        let vs = self.v.iter_mut();
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(ms).zip(vs) {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = gd[i] * clip;
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                pd[i] -= step_size * md[i] / denom;
            }
        }
        norm
    }
}
