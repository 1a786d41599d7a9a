//! Adam and the cosine-annealing learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    /// Number of completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            epsilon,
            first_moment: zeros.clone(),
            second_moment: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len(), state.first_moment.len()],
            &[grads.len()],
        ));
    }
    if lr < 0.0 {
        return Err(Error::domain("adam_step", format!("negative learning rate {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m: Vec<f64> = state.first_moment[i]
            .data()
            .iter()
            .zip(g.data())
            .map(|(m, g)| b1 * m + (1.0 - b1) * g)
            .collect();
        let v: Vec<f64> = state.second_moment[i]
            .data()
            .iter()
            .zip(g.data())
            .map(|(v, g)| b2 * v + (1.0 - b2) * g * g)
            .collect();
        let updated: Vec<f64> = p
            .data()
            .iter()
            .zip(m.iter().zip(&v))
            .map(|(&x, (&m, &v))| x - lr * (m / c1) / ((v / c2).sqrt() + eps))
            .collect();
        let shape = p.shape().to_vec();
        *p = Tensor::new(shape.clone(), updated)?;
        state.first_moment[i] = Tensor::new(shape.clone(), m)?;
        state.second_moment[i] = Tensor::new(shape, v)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: u64, min_lr: f64) -> Result<Self> {
        if !(base_lr > 0.0) || total_steps == 0 || !(min_lr >= 0.0) {
            return Err(Error::Config(format!(
                "cosine schedule needs base_lr > 0, total_steps > 0, min_lr >= 0 (got {base_lr}, {total_steps}, {min_lr})"
            )));
        }
        Ok(Self {
            base_lr,
            total_steps,
            min_lr,
        })
    }

    /// Learning rate at `step`; steps past the end clamp to `min_lr`.
    pub fn lr(&self, step: u64) -> f64 {
        let step = if step > self.total_steps {
            log::warn!(
                "cosine schedule step {step} beyond total {}; clamping",
                self.total_steps
            );
            self.total_steps
        } else {
            step
        };
        let progress = step as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, step: u64) -> f64 {
    schedule.lr(step)
}
