//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::params::{Group, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_physics: f64,
    pub lr_network: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient, applied to network leaves only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_physics: 3e-2,
            lr_network: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Physics => self.lr_physics,
            Group::Network => self.lr_network,
        }
    }
}

/// Moment buffers, one pair per leaf of the matching [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .leaves()
            .iter()
            .map(|l| Tensor::zeros(l.value.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One update from the gradients stored in `params`, followed by the
/// leaf constraints. Leaves whose gradient is not finite are left untouched;
/// their names are returned.
pub fn optimizer_step(params: &mut ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Vec<String> {
    assert_eq!(state.m.len(), params.len(), "optimizer state does not match parameters");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut flagged = Vec::new();
    for (i, leaf) in params.leaves_mut().iter_mut().enumerate() {
        if !leaf.trainable {
            continue;
        }
        if !leaf.grad.all_finite() {
            flagged.push(leaf.name.clone());
            continue;
        }
        let lr = cfg.lr(leaf.group);
        let decay = if leaf.group == Group::Network {
            lr * cfg.weight_decay
        } else {
            0.0
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = leaf.grad.data();
        for (j, theta) in leaf.value.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *theta -= lr * mh / (vh.sqrt() + cfg.eps);
            *theta -= decay * *theta;
        }
    }
    params.apply_constraints();
    flagged
}
