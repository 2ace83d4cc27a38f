use crate::error::{Error, Result};

use super::{GradientBundle, ModelParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first_moment: ModelParams::zeros(params.dims),
            second_moment: ModelParams::zeros(params.dims),
            step_count: 0,
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &GradientBundle,
    lr: f64,
) -> Result<()> {
    if params.dims != grads.0.dims || params.dims != state.first_moment.dims {
        return Err(Error::invalid(
            "adam_step: parameter, state and gradient shapes differ",
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let moments = state
        .first_moment
        .tensors_mut()
        .into_iter()
        .zip(state.second_moment.tensors_mut());
    for ((p, g), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.0.tensors())
        .zip(moments)
    {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
