//! Parameter update rules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParameterSet, Tensor};
use crate::{Error, Result};

#[cfg(test)]
mod tests;

/// RMSProp hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub lr_decay_per_epoch: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.045,
            decay: 0.9,
            epsilon: 1.0,
            lr_decay_per_epoch: 0.975,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.decay)
            && self.epsilon > 0.0
            && self.lr_decay_per_epoch > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate after `completed_epochs` full epochs.
    pub fn learning_rate_at(&self, completed_epochs: usize) -> f64 {
        let n = i32::try_from(completed_epochs).unwrap_or(i32::MAX);
        self.learning_rate * self.lr_decay_per_epoch.powi(n)
    }
}

/// RMSProp without momentum; `epsilon` sits under the square root.
///
/// `ms ← decay·ms + (1 − decay)·g²`, `p ← p − lr·g / √(ms + epsilon)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    config: RmsPropConfig,
    learning_rate: f64,
    mean_square: BTreeMap<ParamId, Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            learning_rate: config.learning_rate,
            mean_square: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.config
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Sets the schedule to the rate that applies after `completed_epochs`.
    pub fn apply_lr_decay(&mut self, completed_epochs: usize) {
        self.learning_rate = self.config.learning_rate_at(completed_epochs);
    }

    /// Mean-square accumulator of one parameter, if it has been updated.
    pub fn accumulator(&self, id: ParamId) -> Option<&Tensor> {
        self.mean_square.get(&id)
    }

    /// Updates every parameter that has an entry in `grads`.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        check_finite(params, grads)?;
        let (rho, eps, lr) = (self.config.decay, self.config.epsilon, self.learning_rate);
        for (id, g) in grads.iter() {
            let ms = self
                .mean_square
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.value_mut(id);
            for ((p, m), &g) in p.data_mut().iter_mut().zip(ms.data_mut()).zip(g.data()) {
                *m = rho * *m + (1.0 - rho) * g * g;
                *p -= lr * g / (*m + eps).sqrt();
            }
        }
        Ok(())
    }
}

/// Plain gradient descent `p ← p − lr·g`.
pub fn sgd_step(params: &mut ParameterSet, grads: &Gradients, lr: f64) -> Result<()> {
    check_finite(params, grads)?;
    for (id, g) in grads.iter() {
        for (p, g) in params.value_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

fn check_finite(params: &ParameterSet, grads: &Gradients) -> Result<()> {
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(params.get(id).name.clone()));
        }
        if g.shape() != params.value(id).shape() {
            return Err(Error::InvalidInput(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                params.get(id).name,
                g.shape(),
                params.value(id).shape()
            )));
        }
    }
    Ok(())
}
