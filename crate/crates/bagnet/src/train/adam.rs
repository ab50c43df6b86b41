//! Adam with bias correction over the flat parameter vector.

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// First/second moment estimates plus the step counter. Mirrors the flat
/// parameter vector element for element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }
}

/// One optimizer step:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`, then
/// `p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
///
/// Batch-norm running moments are not part of the flat vector, so the
/// optimizer never touches them.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "adam_step: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = T::from_f64(config.adam_beta1);
    let b2 = T::from_f64(config.adam_beta2);
    let one = T::one();
    let lr = T::from_f64(config.learning_rate);
    let eps = T::from_f64(config.adam_eps);
    let bias1 = T::from_f64(1.0 - config.adam_beta1.powi(state.t as i32));
    let bias2 = T::from_f64(1.0 - config.adam_beta2.powi(state.t as i32));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
