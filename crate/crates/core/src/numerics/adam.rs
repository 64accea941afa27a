use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Bias-corrected Adam with per-parameter moments keyed by parameter name.
///
/// Parameters appear and disappear as experts are created, so each slot keeps
/// its own step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.step)
    }

    /// Applies one update to `param` in place.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(shape_err!(
                "adam step for {name}: param {:?} vs grad {:?}",
                param.shape(),
                grad.shape()
            ));
        }
        let n = param.len();
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
        if slot.m.len() != n {
            return Err(shape_err!(
                "adam slot {name} has {} entries, param {n}",
                slot.m.len()
            ));
        }
        slot.step += 1;
        let t = slot.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
