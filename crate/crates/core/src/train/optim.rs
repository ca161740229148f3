use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inverse-square-root schedule with linear warmup:
/// `scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub d_model: usize,
    pub warmup: usize,
    pub scale: f64,
}

impl Schedule {
    /// Learning rate of the 1-based update `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.scale * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment of one parameter, with its own update count so
/// that parameters added mid-training get a correct bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub adam: AdamConfig,
    pub schedule: Schedule,
    /// Updates applied since the schedule was (re)started.
    pub step: u64,
    pub slots: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(adam: AdamConfig, schedule: Schedule) -> Self {
        OptimizerState {
            adam,
            schedule,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Advance the schedule by one update and return its learning rate.
    pub fn next_lr(&mut self) -> f64 {
        self.step += 1;
        self.schedule.lr(self.step)
    }

    /// Moment buffers must match the parameter they belong to.
    pub fn check_against(&self, params: &Params<T>) -> Result<()> {
        for (name, slot) in &self.slots {
            let p = params.get(name)?;
            if slot.m.shape() != p.shape() || slot.v.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "optimizer moments",
                    lhs: slot.m.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient tensor together.
pub fn global_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let c = T::from_f64_lossy(max_norm / norm);
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x * c);
        }
    }
    norm
}

/// One Adam update with bias correction at learning rate `lr`.
///
/// Every gradient is checked before anything is modified, so a non-finite
/// gradient leaves both parameters and moments untouched.
pub fn adam_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.adam;
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let slot = state
            .slots
            .entry(name.clone())
            .or_insert_with(|| Moments::zeros(g.shape()));
        slot.step += 1;
        let c1 = 1.0 - beta1.powi(slot.step as i32);
        let c2 = 1.0 - beta2.powi(slot.step as i32);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k].to_f64_lossy();
            let mk = beta1 * m[k].to_f64_lossy() + (1.0 - beta1) * gk;
            let vk = beta2 * v[k].to_f64_lossy() + (1.0 - beta2) * gk * gk;
            m[k] = T::from_f64_lossy(mk);
            v[k] = T::from_f64_lossy(vk);
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + eps);
            *x = T::from_f64_lossy(x.to_f64_lossy() - update);
        }
    }
    Ok(())
}
