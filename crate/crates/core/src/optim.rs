//! First-order optimizers on flat parameter vectors, plus learning-rate
//! schedules.
//!
//! Steps are pure functions: they take the current parameters, gradients,
//! and optimizer state, and return the updated parameters and state. That
//! keeps training loops trivially replayable — same inputs, same bytes out.
//!
//! Learning rates are linearly rescaled by `batch_size / 256` so configs
//! tuned at the reference batch size transfer to other sizes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Batch size at which `base_lr` applies unscaled.
pub const REFERENCE_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gradient has {grads} entries but parameters have {params}")]
    LengthMismatch { params: usize, grads: usize },
    #[error("optimizer state sized for {state} parameters, got {params}")]
    StateLength { state: usize, params: usize },
    #[error("epoch {epoch} out of range for a {total}-epoch schedule")]
    BadEpoch { epoch: usize, total: usize },
    #[error("hyperparameter {name} = {value} is out of range")]
    BadHyper { name: &'static str, value: f64 },
}

/// Adam moment estimates and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }
}

/// One Adam update with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamState,
    lr: f64,
) -> Result<(Vec<f64>, AdamState)> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    if state.m.len() != params.len() {
        return Err(Error::StateLength {
            state: state.m.len(),
            params: params.len(),
        });
    }
    let step = state.step + 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let mut next = AdamState {
        m: Vec::with_capacity(params.len()),
        v: Vec::with_capacity(params.len()),
        step,
    };
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let m = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        let v = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        out.push(params[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
        next.m.push(m);
        next.v.push(v);
    }
    Ok((out, next))
}

/// Heavy-ball velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(param_count: usize) -> Self {
        Self {
            velocity: vec![0.0; param_count],
        }
    }
}

/// One SGD update with heavy-ball momentum; weight decay enters as an L2
/// gradient term (`g_eff = g + wd·w`), so it is damped by momentum like any
/// other gradient.
pub fn sgd_step(
    params: &[f64],
    grads: &[f64],
    state: &SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(Vec<f64>, SgdState)> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    if state.velocity.len() != params.len() {
        return Err(Error::StateLength {
            state: state.velocity.len(),
            params: params.len(),
        });
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::BadHyper {
            name: "momentum",
            value: momentum,
        });
    }
    let mut velocity = Vec::with_capacity(params.len());
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let g_eff = grads[i] + weight_decay * params[i];
        let v = momentum * state.velocity[i] + g_eff;
        out.push(params[i] - lr * v);
        velocity.push(v);
    }
    Ok((out, SgdState { velocity }))
}

/// Learning-rate curve shape over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    /// Half-cosine from the base rate toward zero over the run.
    Cosine,
    /// Multiply by `gamma` at each milestone epoch.
    Step { gamma: f64, milestones: Vec<usize> },
}

/// A complete schedule: shape, base rate, horizon, and the batch size used
/// for linear scaling against [`REFERENCE_BATCH`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
}

/// Learning rate for `epoch` (0-based, must be below `total_epochs`).
pub fn lr_at(spec: &ScheduleSpec, epoch: usize) -> Result<f64> {
    if epoch >= spec.total_epochs {
        return Err(Error::BadEpoch {
            epoch,
            total: spec.total_epochs,
        });
    }
    if spec.base_lr <= 0.0 {
        return Err(Error::BadHyper {
            name: "base_lr",
            value: spec.base_lr,
        });
    }
    let scaled = spec.base_lr * spec.batch_size as f64 / REFERENCE_BATCH as f64;
    let lr = match &spec.kind {
        ScheduleKind::Constant => scaled,
        ScheduleKind::Cosine => {
            let frac = epoch as f64 / spec.total_epochs as f64;
            scaled * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
        ScheduleKind::Step { gamma, milestones } => {
            if *gamma <= 0.0 {
                return Err(Error::BadHyper {
                    name: "gamma",
                    value: *gamma,
                });
            }
            let passed = milestones.iter().filter(|&&m| m <= epoch).count();
            scaled * gamma.powi(passed as i32)
        }
    };
    Ok(lr)
}
