//! AdamW with decoupled weight decay, global-norm clipping and a cosine
//! learning-rate schedule with linear warmup.

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::scalar::Scalar;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Learning rate used by fine-tuning.
    pub finetune_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 64,
            epochs: 30,
            finetune_epochs: 30,
            finetune_lr: 3e-3,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [self.lr, self.eps, self.clip_norm, self.finetune_lr];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("lr, finetune_lr, eps and clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err("weight_decay must be non-negative".into());
        }
        if self.batch_size < 2 {
            return Err("batch_size must be at least 2".into());
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total`: linear from 0 to `base` over the
/// warmup, then cosine decay to 0 at `total`. Warmup longer than the run is
/// shortened to the run; steps past `total` use the final value.
pub fn lr_at(base: f64, warmup: u64, total: u64, step: u64) -> f64 {
    let warmup = warmup.min(total);
    let step = step.min(total);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total == warmup {
        // no decay phase: the run ends exactly at the end of warmup
        return if total == 0 { 0.0 } else { base };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over `grads`.
pub fn global_norm<S: Scalar>(grads: &[&Tensor<S>]) -> f64 {
    grads
        .iter()
        .map(|g| g.sum_squares().to_f64_lossy())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `clip`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [&mut Tensor<S>], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sum_squares().to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let factor = S::lit(clip / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
}

/// Optimizer state: first/second moments per parameter and the step count.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub config: OptimConfig,
    pub base_lr: f64,
    pub step: u64,
    pub total_steps: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: &OptimConfig, base_lr: f64, shapes: &[Vec<usize>], total_steps: u64) -> Self {
        Self {
            config: config.clone(),
            base_lr,
            step: 0,
            total_steps,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(
            self.base_lr,
            self.config.warmup_steps,
            self.total_steps,
            self.step,
        )
    }

    /// One update of the parameters flagged `trainable`.
    ///
    /// Gradients are checked for finiteness, clipped jointly, then each
    /// parameter is decayed by `lr·decay` before the bias-corrected Adam step.
    pub fn update(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &mut [Tensor<S>],
        names: &[String],
        trainable: &[bool],
    ) -> Result<StepInfo, TrainError> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        for ((g, name), &t) in grads.iter().zip(names).zip(trainable) {
            if t && !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
        }
        let mut active: Vec<&mut Tensor<S>> = grads
            .iter_mut()
            .zip(trainable)
            .filter(|(_, &t)| t)
            .map(|(g, _)| g)
            .collect();
        let grad_norm = clip_global_norm(&mut active, self.config.clip_norm);

        self.step += 1;
        let lr = self.current_lr();
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let one = S::one();
        let bc1 = S::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_s = S::lit(lr);
        let shrink = S::lit(1.0 - lr * c.weight_decay);
        let eps = S::lit(c.eps);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = b1 * *mj + (one - b1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = b2 * *vj + (one - b2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((p, &mj), &vj) in params[i].data_mut().iter_mut().zip(m).zip(v) {
                *p = *p * shrink;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                *p = *p - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepInfo { lr, grad_norm })
    }
}
