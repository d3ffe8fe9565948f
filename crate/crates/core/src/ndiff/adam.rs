use std::collections::BTreeMap;

use super::params::{Grads, Group, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments for the parameters of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of the parameters in `group`. Other groups
/// are left untouched.
pub fn adam_step(params: &mut ParamSet, grads: &Grads, state: &mut AdamState, lr: f64, group: Group) -> Result<()> {
    let names: Vec<String> = params.names_in(group).map(str::to_owned).collect();
    for name in &names {
        let Some(g) = grads.get(name) else {
            return Err(Error::Argument(format!("missing gradient for {name}")));
        };
        if g.shape() != params.value(name).shape() {
            return Err(Error::Shape(format!("gradient for {name} is {:?}, parameter is {:?}", g.shape(), params.value(name).shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for name in &names {
        let g = &grads[name];
        let (rows, cols) = g.shape();
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(rows, cols));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(rows, cols));
        let p = params.value_mut(name).expect("name from the set");
        for k in 0..g.len() {
            let gk = g.data()[k];
            let mk = state.beta1 * m.data()[k] + (1.0 - state.beta1) * gk;
            let vk = state.beta2 * v.data()[k] + (1.0 - state.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            p.data_mut()[k] -= lr * (mk / bc1) / ((vk / bc2).sqrt() + state.eps);
        }
    }
    Ok(())
}
