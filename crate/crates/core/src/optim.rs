//! AdamW with decoupled weight decay, and a per-step cosine learning-rate decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize) -> Result<Self> {
        if !(lr_max.is_finite() && lr_min.is_finite() && lr_min >= 0.0 && lr_min <= lr_max) {
            return Err(Error::Config(format!(
                "cosine schedule needs 0 <= lr_min <= lr_max, got {lr_min} and {lr_max}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("cosine schedule needs at least one step".into()));
        }
        Ok(CosineSchedule {
            lr_max,
            lr_min,
            total_steps,
        })
    }

    /// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`; the endpoints are exact.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step == 0 {
            return Ok(self.lr_max);
        }
        if step == self.total_steps {
            return Ok(self.lr_min);
        }
        let progress = step as f64 / self.total_steps as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers of parameter `index`, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(index)
            .and_then(|m| m.as_ref())
            .map(|m| (m.m.as_slice(), m.v.as_slice()))
    }

    /// One update of every non-frozen parameter from its accumulated gradient.
    ///
    /// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`, with the
    /// decay term applied to weights only.
    pub fn step(&mut self, params: &mut [Param], lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.frozen && p.tensor.grad().is_none()) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{}` has no gradient buffer",
                p.name
            )));
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        for (p, slot) in params.iter_mut().zip(self.moments.iter_mut()) {
            if p.frozen {
                continue;
            }
            let decay = if p.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (data, grad) = p.tensor.data_and_grad_mut();
            let grad = grad.expect("checked above");
            let state = slot.get_or_insert_with(|| Moments {
                m: vec![0.0; data.len()],
                v: vec![0.0; data.len()],
            });
            for (((theta, &g), m), v) in data
                .iter_mut()
                .zip(grad)
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta = *theta * decay - lr * (m_hat / (v_hat.sqrt() + EPSILON));
            }
        }
        Ok(())
    }
}
