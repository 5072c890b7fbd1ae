use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Var};
use crate::model::{ParamSet, ParamVars};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One Adam update in place. Weight decay is added to the gradient before
/// the moment updates; moments are bias-corrected.
///
/// # Panics
/// If `grads` does not mirror `params`.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, grads: &[Tensor], lr: f64, weight_decay: f64) {
    assert_eq!(grads.len(), state.m.len(), "gradient count");
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
    for (k, p) in params.tensors_mut().iter_mut().enumerate() {
        assert_eq!(grads[k].shape(), p.shape(), "gradient shape");
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[k].data()[i] + weight_decay * *w;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (libm::sqrt(vh) + ADAM_EPS);
        }
    }
}

/// `θ - α ∇loss`, recorded so the result can be differentiated again with
/// respect to `θ`.
pub fn sgd_step_differentiable<'t>(
    params: &ParamVars<'t>,
    loss: Var<'t>,
    lr: f64,
) -> Result<ParamVars<'t>, AutodiffError> {
    Ok(ParamVars::from_vars(sgd_step_vars(params.vars(), loss, lr)?))
}

/// [`sgd_step_differentiable`] over an arbitrary list of variables.
pub fn sgd_step_vars<'t>(vars: &[Var<'t>], loss: Var<'t>, lr: f64) -> Result<Vec<Var<'t>>, AutodiffError> {
    let grads = loss.tape().gradient(loss, vars, true)?;
    Ok(vars.iter().zip(grads).map(|(p, g)| p.sub(g.scale(lr))).collect())
}
