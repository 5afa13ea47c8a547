use serde::{Deserialize, Serialize};

use super::ParamSlot;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "AdamConfig::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_epsilon")]
    pub epsilon: f64,
}

impl AdamConfig {
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_epsilon() -> f64 {
        1e-8
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon.is_finite()
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Validation(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: Self::default_lr(),
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            epsilon: Self::default_epsilon(),
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first
/// step and must keep the same slot layout afterwards.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        for s in slots.iter() {
            if s.values.len() != s.grad.len() {
                return Err(Error::Shape(format!(
                    "`{}` has {} values but {} gradients",
                    s.name,
                    s.values.len(),
                    s.grad.len()
                )));
            }
            if s.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(s.name.clone()));
            }
        }
        if self.step == 0 {
            self.first = slots.iter().map(|s| vec![0.0; s.values.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != slots.len()
            || self.first.iter().zip(slots.iter()).any(|(m, s)| m.len() != s.values.len())
        {
            return Err(Error::Shape(
                "parameter layout changed between optimizer steps".into(),
            ));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((slot, m), v) in slots.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..slot.values.len() {
                let g = slot.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                slot.values[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
