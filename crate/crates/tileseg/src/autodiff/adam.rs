//! Adam with bias correction.

use super::AutodiffError;
use crate::tensor::Tensor;

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }
}

/// One Adam step: `param -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_update(
    param: &mut Tensor,
    grad: Option<&Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), AutodiffError> {
    let grad = grad.ok_or(AutodiffError::MissingGrad)?;
    assert_eq!(param.shape(), grad.shape(), "grad shape mismatch");
    assert_eq!(param.numel(), state.m.len(), "state shape mismatch");
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
