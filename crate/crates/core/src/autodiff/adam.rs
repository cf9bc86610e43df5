//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamSet;
use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One in-place Adam update of `params` using `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(shape_err!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((p, g), m) in params.tensors().iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || m.len() != p.numel() {
            return Err(shape_err!(
                "adam: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(c.beta1);
    let b2 = T::of(c.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let lr = T::of(c.learning_rate);
    let eps = T::of(c.eps);
    for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
