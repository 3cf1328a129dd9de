use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second[i]
    }
}

/// One AdamW update with decoupled weight decay:
///
/// ```text
/// theta <- theta - lr * wd * theta
/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// ```
///
/// Frozen parameters are skipped entirely and their moments never move.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate {lr}")));
    }
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        let p = params.at(i);
        if p.value.shape() != g.shape() || state.first[i].shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{}: param {:?} grad {:?}", p.name, p.value.shape(), g.shape()),
            ));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);

    for (i, g) in grads.iter().enumerate() {
        let p = params.at_mut(i);
        if p.frozen {
            continue;
        }
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((theta, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *theta -= lr * c.weight_decay * *theta;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let mh = *mi / bc1;
            let vh = *vi / bc2;
            *theta -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at
/// `total_steps`. Out-of-range steps are clamped.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if warmup_steps > 0 && step <= warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}
