use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments for every entry of one parameter set; empty
/// tensors for running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<E> {
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Real> AdamState<E> {
    pub fn new(params: &ParameterSet<E>) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(if e.trainable { e.value.shape() } else { &[0] }))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
///
/// Entries without a gradient keep their value and moments; a warning is
/// logged for trainable ones on the first step.
pub fn adamw_step<E: Real>(
    params: &mut ParameterSet<E>,
    grads: &[Option<Tensor<E>>],
    state: &mut AdamState<E>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Invalid(format!(
            "adamw: {n} parameters, {} gradients, {} moment slots",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| params.id(&e.name).expect("entry names resolve"))
        .collect();
    for id in ids {
        let i = id.index();
        let Some(g) = &grads[i] else {
            // once per run; a parameter off the loss path stays that way
            if state.step == 1 {
                log::warn!("adamw: no gradient for {}, skipped", params.entries()[i].name);
            }
            continue;
        };
        let theta = params.get_mut(id);
        if g.shape() != theta.shape() || state.m[i].shape() != theta.shape() {
            return Err(Error::Invalid(format!("adamw: gradient shape {:?} for parameter {:?}", g.shape(), theta.shape())));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, x) in theta.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j].to_f64().unwrap_or(f64::NAN);
            let mj = cfg.beta1 * m[j].to_f64().unwrap_or(0.0) + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].to_f64().unwrap_or(0.0) + (1.0 - cfg.beta2) * gj * gj;
            m[j] = E::lit(mj);
            v[j] = E::lit(vj);
            let xj = x.to_f64().unwrap_or(f64::NAN);
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps) + cfg.weight_decay * xj;
            *x = E::lit(xj - lr * update);
        }
    }
    Ok(())
}

/// Learning rate at a (possibly fractional) epoch position.
///
/// The base rate halves every `halve_every` epochs. Within each cycle of
/// `cycle_epochs` a cosine runs from the base down to a tenth of it at
/// mid-cycle and back up to the base at the cycle end.
pub fn lr_at_epoch(epoch: f64, lr: f64, cycle_epochs: usize, halve_every: usize) -> f64 {
    let epoch = epoch.max(0.0);
    let base = lr * 0.5f64.powi((epoch.floor() as usize / halve_every.max(1)) as i32);
    let cycle = cycle_epochs.max(1) as f64;
    let frac = (epoch % cycle) / cycle;
    let low = base / 10.0;
    low + (base - low) * (1.0 + (2.0 * PI * frac).cos()) / 2.0
}

/// Learning rate before optimizer step `step` (0-based).
pub fn lr_at(step: u64, steps_per_epoch: usize, cfg: &super::TrainConfig) -> f64 {
    let epoch = step as f64 / steps_per_epoch.max(1) as f64;
    lr_at_epoch(epoch, cfg.lr, cfg.cycle_epochs, cfg.halve_every)
}
