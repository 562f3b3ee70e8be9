//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.02;

/// Learning rates are rescaled by `batch_size × n_devices / 256`.
pub const LR_REFERENCE_BATCH: f64 = 256.0;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter AdamW state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)`.
    ///
    /// `names` label parameters in numeric errors. The parameter list must
    /// keep the same order and shapes across calls.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Tensor<S>],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len()]));
        }
        for ((p, g), i) in params.iter().zip(grads).zip(0..) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::shape("adamw state", &[self.moments.len()], &[params.len()]));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i].as_f64();
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let theta = data[i].as_f64();
                data[i] = S::of(theta - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * theta));
            }
        }
        Ok(())
    }
}

/// Linear warmup from `start_lr` to the batch-scaled base rate, then cosine
/// annealing to `min_lr` at the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub start_lr: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub n_devices: usize,
}

impl ScheduleSpec {
    /// `base_lr × batch_size × n_devices / 256`.
    pub fn effective_base(&self) -> f64 {
        self.base_lr * (self.batch_size * self.n_devices) as f64 / LR_REFERENCE_BATCH
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_devices == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size, n_devices and steps_per_epoch must be positive".into(),
            ));
        }
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        let eff = self.effective_base();
        if !(self.min_lr <= self.start_lr && self.start_lr <= eff) {
            return Err(Error::Config(format!(
                "schedule needs min_lr ≤ start_lr ≤ effective base, got {} ≤ {} ≤ {eff}",
                self.min_lr, self.start_lr
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.effective_base();
        let warmup = self.warmup_steps();
        if step < warmup {
            return self.start_lr + (base - self.start_lr) * step as f64 / warmup as f64;
        }
        let span = self.total_steps().saturating_sub(1).saturating_sub(warmup);
        if span == 0 {
            return if step > warmup || self.total_steps() <= warmup + 1 {
                self.min_lr
            } else {
                base
            };
        }
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (base - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// `lr_at` as a free function.
pub fn lr_at(schedule: &ScheduleSpec, step: usize) -> f64 {
    schedule.lr_at(step)
}
