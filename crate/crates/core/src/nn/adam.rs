use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::{GradientBundle, Parameters};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        AdamConfig {
            alpha,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::InvalidArgument(
                "ADAM betas must lie in [0, 1)".into(),
            ));
        }
        if config.alpha <= 0.0 || config.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(
                "ADAM learning rate and epsilon must be positive".into(),
            ));
        }
        let m: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|(_, t)| t.zeros_like())
            .collect();
        Ok(AdamState {
            config,
            step: 0,
            v: m.clone(),
            m,
        })
    }
}

/// One bias-corrected ADAM step, in place.
///
/// An all-zero gradient bundle leaves parameters and state untouched.
pub fn adam_update<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &GradientBundle,
    state: &mut AdamState,
) -> Result<()> {
    grads.check_matches(params)?;
    if state.m.len() != grads.entries().len() {
        return Err(Error::shape(
            "AdamState",
            grads.entries().len(),
            state.m.len(),
        ));
    }
    for ((_, g), m) in grads.entries().iter().zip(&state.m) {
        if g.shape() != m.shape() {
            return Err(Error::shape(
                "AdamState moments",
                format!("{:?}", g.shape()),
                format!("{:?}", m.shape()),
            ));
        }
    }
    if grads.is_zero() {
        return Ok(());
    }
    state.step += 1;
    let AdamConfig {
        alpha,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((_, p), (_, g)), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.entries())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= alpha * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
