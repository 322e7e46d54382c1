use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Mat> = params
            .tensors
            .iter()
            .map(|t| Mat::zeros(t.rows, t.cols))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
/// Non-finite gradients abort the step without touching any state.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    grads: &[Option<Mat>],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("gradient count does not match parameters".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.tensors[i].shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}",
                    params.names()[i],
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {} at step {}",
                    params.names()[i],
                    state.step + 1
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = &mut params.tensors[i];
        for j in 0..p.data.len() {
            let gj = g.as_ref().map_or(0.0, |g| g.data[j]);
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m.data[j] / bc1;
            let v_hat = v.data[j] / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
