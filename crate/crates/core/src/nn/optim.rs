use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One adaptive-moment update over every parameter, then clear gradients.
///
/// A tensor whose gradient is identically zero is left untouched, moments
/// included: type-specific sub-networks that saw no agents of their type in
/// a batch keep their state, and an all-zero gradient is a fixed point.
/// Bias correction uses each tensor's own update count.
pub fn optimizer_step(store: &mut ParamStore, config: &OptimizerConfig) -> Result<()> {
    config.validate()?;
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    for p in store.params_mut() {
        if p.grad.data().iter().all(|&g| g == 0.0) {
            continue;
        }
        p.steps += 1;
        let c1 = 1.0 - b1.powi(p.steps as i32);
        let c2 = 1.0 - b2.powi(p.steps as i32);
        let g = p.grad.data().to_vec();
        let m = p.first_moment.data_mut();
        for (mi, gi) in m.iter_mut().zip(&g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = p.second_moment.data_mut();
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let (m, v) = (p.first_moment.data().to_vec(), p.second_moment.data().to_vec());
        for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(&m).zip(&v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    store.step += 1;
    store.zero_grad();
    Ok(())
}
