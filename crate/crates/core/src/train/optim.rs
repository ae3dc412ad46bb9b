use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// First and second moments per parameter path, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    /// One decoupled-decay Adam step at learning rate `lr`. Parameters
    /// without a gradient are left alone (no decay, no moment update).
    pub fn step(
        &self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        state: &mut AdamState,
        lr: f64,
    ) -> Result<()> {
        for (path, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter '{path}'")));
            }
            let p = params.get(path)?;
            if p.shape() != g.shape() {
                return Err(crate::error::shape_mismatch(&format!("gradient of '{path}'"), g.shape(), p.shape()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (path, g) in grads {
            let p = params.get_mut(path)?;
            let dtype = p.dtype();
            let m = state.m.entry(path.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = state.v.entry(path.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = b1 * md[k] + (1.0 - b1) * gk;
                vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] = dtype.round(pd[k] * decay - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to 1% of the initial rate.
    #[default]
    CosineAfterWarmup,
}

pub const FINAL_LR_FRACTION: f64 = 0.01;

/// Learning rate for 1-based `epoch`.
pub fn learning_rate(lr_init: f64, epoch: usize, warmup: usize, total: usize, _schedule: Schedule) -> f64 {
    let e = epoch as f64;
    if warmup > 0 && epoch <= warmup {
        return lr_init * (e / warmup as f64).min(1.0);
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((e - warmup as f64) / span).clamp(0.0, 1.0);
    let lr_min = FINAL_LR_FRACTION * lr_init;
    lr_min + (lr_init - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
