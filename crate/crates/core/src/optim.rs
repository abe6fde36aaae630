//! AdamW with global-norm clipping and a warmup + cosine schedule that
//! decays to a floor fraction of the peak learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamSet, TinyLM};
use crate::objectives::ParamMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_fraction: f64,
    pub floor_fraction: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            warmup_fraction: 0.1,
            floor_fraction: 0.1,
        }
    }
}

/// Learning rate at `step` of a `total`-step phase: linear warmup over the
/// first `warmup_fraction·total` steps, then cosine decay to
/// `floor_fraction·peak` at `step == total`.
pub fn scheduled_lr(peak: f64, step: usize, total: usize, cfg: &AdamWConfig) -> f64 {
    let floor = cfg.floor_fraction * peak;
    let warmup = cfg.warmup_fraction * total as f64;
    let s = step as f64;
    if s < warmup {
        return peak * ((s + 1.0) / warmup).min(1.0);
    }
    let span = total as f64 - warmup;
    if span <= 0.0 {
        return floor;
    }
    let progress = ((s - warmup) / span).clamp(0.0, 1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub peak_lr: f64,
    pub total_steps: usize,
    step: usize,
    m: ParamSet,
    v: ParamSet,
}

impl OptimizerState {
    pub fn new(model: &TinyLM, peak_lr: f64, total_steps: usize, config: AdamWConfig) -> Self {
        let zeros = model.params().zeros_like();
        Self {
            config,
            peak_lr,
            total_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        scheduled_lr(self.peak_lr, self.step, self.total_steps, &self.config)
    }

    /// One AdamW update. With a mask, entries outside it are left untouched
    /// (no moment update, no decay). On a non-finite result the model is
    /// unchanged and an error returned.
    pub fn apply(
        &mut self,
        model: &mut TinyLM,
        mut grads: ParamSet,
        mask: Option<&ParamMask>,
    ) -> Result<()> {
        if self.step >= self.total_steps {
            return Err(Error::Invalid(format!(
                "optimizer step {} beyond total {}",
                self.step, self.total_steps
            )));
        }
        if !grads.same_shape(model.params()) {
            return Err(Error::Shape("gradient shapes".into()));
        }
        if let Some(mask) = mask {
            mask.apply(&mut grads);
        }
        clip_global_norm(&mut grads, self.config.clip_norm);

        let c = &self.config;
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        let mut new_params = model.params().clone();
        let mut new_m = self.m.clone();
        let mut new_v = self.v.clone();
        let mut flat = 0usize;
        for ti in 0..new_params.tensors().len() {
            let g = grads.tensor(ti).data();
            let p = new_params.tensor_mut(ti).data_mut();
            let m = new_m.tensor_mut(ti).data_mut();
            let v = new_v.tensor_mut(ti).data_mut();
            for j in 0..p.len() {
                let active = mask.is_none_or(|mk| mk.get(flat + j));
                if !active {
                    continue;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
            flat += p.len();
        }
        if !new_params.is_finite() {
            return Err(Error::Diverged {
                phase: "optimizer".into(),
                step: self.step,
            });
        }
        *model.params_mut_unchecked() = new_params;
        self.m = new_m;
        self.v = new_v;
        self.step += 1;
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::apply`] without a mask.
pub fn adamw_step(model: &mut TinyLM, grads: ParamSet, opt: &mut OptimizerState) -> Result<()> {
    opt.apply(model, grads, None)
}
