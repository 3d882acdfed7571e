//! Adam with bias correction and an optional cosine learning-rate decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Half-cosine from `lr_start` at step 0 to `lr_end` at `total_steps`, flat afterwards.
    Cosine {
        lr_start: f64,
        lr_end: f64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                lr_start,
                lr_end,
                total_steps,
            } => {
                if total_steps == 0 {
                    return lr_end;
                }
                let t = step.min(total_steps) as f64 / total_steps as f64;
                lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained NaN or infinity; nothing changed except the incident count.
    Skipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// Number of applied updates.
    pub step: u64,
    pub skipped: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub schedule: LrSchedule,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, schedule: LrSchedule) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            step: 0,
            skipped: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            schedule,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<StepOutcome> {
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() || self.first_moment.len() != tensors.len() {
            return Err(Error::shape(format!("{} gradient tensors", tensors.len()), grads.len()));
        }
        for (g, p) in grads.iter().zip(tensors.iter()) {
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("{:?}", p.shape()), format!("{:?}", g.shape())));
            }
        }
        if !grads.iter().all(Tensor::is_finite) {
            self.skipped += 1;
            log::warn!(
                "skipping optimizer step {}: non-finite gradient ({} skipped so far)",
                self.step,
                self.skipped
            );
            return Ok(StepOutcome::Skipped);
        }

        let lr = self.schedule.lr(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in tensors
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        self.step += 1;
        Ok(StepOutcome::Applied)
    }
}
