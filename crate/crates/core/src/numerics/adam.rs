use serde::{Deserialize, Serialize};

use super::param::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters shared by every parameter's optimizer state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in (0,1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "adam lr must be >= 0 and epsilon > 0, got {} and {}",
                self.lr, self.epsilon
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl AdamState {
    pub fn for_shape(rows: usize, cols: usize) -> Self {
        Self {
            first_moment: Tensor::zeros(rows, cols),
            second_moment: Tensor::zeros(rows, cols),
            step_count: 0,
        }
    }

    pub fn for_param(p: &Parameter) -> Self {
        Self::for_shape(p.value.rows(), p.value.cols())
    }
}

/// One bias-corrected Adam update of `p` from its current gradient. The
/// gradient buffer is left as-is.
pub fn adam_step(p: &mut Parameter, s: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !p.grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
    }
    if s.first_moment.shape() != p.value.shape() {
        return Err(Error::dim("adam_step", p.value.shape(), s.first_moment.shape()));
    }
    s.step_count += 1;
    let t = s.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let value = p.value.data_mut();
    let m = s.first_moment.data_mut();
    let v = s.second_moment.data_mut();
    for (i, &g) in p.grad.data().iter().enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}
