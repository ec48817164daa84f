//! Adam with bias correction.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    shape: Vec<usize>,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self::with_hyper(shape, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyper(shape: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = shape.iter().product();
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1, beta2, eps, shape: shape.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

/// One Adam update of `param` given `grad`. Advances `state.t` by one.
pub fn adam_step(param: &Tensor, grad: &Tensor, state: &mut AdamState, eta: f64) -> Result<Tensor> {
    if param.shape() != grad.shape() || param.shape() != state.shape.as_slice() {
        return Err(shape_err(
            "adam_step",
            format!("param {:?}, grad {:?}, state {:?}", param.shape(), grad.shape(), state.shape),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut out = param.data().to_vec();
    for (((p, &g), m), v) in out.iter_mut().zip(grad.data()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= eta * m_hat / (v_hat.sqrt() + state.eps);
    }
    Tensor::new(param.shape().to_vec(), out)
}
