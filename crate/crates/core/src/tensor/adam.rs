use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Real};
use crate::error::{Error, Result};

/// Optimizer hyperparameters. Defaults follow the Adam method with the
/// learning rate used for all training in this crate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "optimizer: need lr > 0, beta1/beta2 in (0,1), epsilon > 0, got {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    pub first_moment: ParamSet<T>,
    pub second_moment: ParamSet<T>,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        AdamState {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            config,
        }
    }

    pub fn save(&self, first: &Path, second: &Path) -> Result<()> {
        self.first_moment.save(first)?;
        self.second_moment.save(second)
    }
}

/// One bias-corrected Adam step, in place:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)` with
/// `m_hat = m / (1 - b1^t)`, `v_hat = v / (1 - b2^t)`.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, grads: &ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
    params.check_congruent(grads, "adam_step gradients")?;
    params.check_congruent(&state.first_moment, "adam_step moments")?;
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(c.lr), T::of(c.epsilon));
    let one = T::one();
    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        for (((p, &g), m), v) in p
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
