use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};
use crate::network::layers::{Module, StateMut};
use crate::network::PoseNetwork;

/// Multiply the learning rate by `gamma` every `every_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Smoothing constant of the squared-gradient average.
    pub alpha: f64,
    pub eps: f64,
    pub step_decay: Option<StepDecay>,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-4,
            alpha: 0.99,
            eps: 1e-8,
            step_decay: None,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FpdError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) || !(self.eps > 0.0) {
            return Err(FpdError::Config(format!(
                "rmsprop needs 0 <= alpha < 1 and eps > 0 (alpha={}, eps={})",
                self.alpha, self.eps
            )));
        }
        if let Some(d) = self.step_decay {
            if d.every_epochs == 0 || !(d.gamma > 0.0) {
                return Err(FpdError::Config(format!("invalid step decay {d:?}")));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.step_decay {
            Some(d) => self.learning_rate * d.gamma.powi((epoch / d.every_epochs) as i32),
            None => self.learning_rate,
        }
    }
}

/// `v <- a v + (1 - a) g^2`, `w <- w - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    config: RmsPropConfig,
    square_avg: Vec<Vec<f32>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        Self {
            config,
            square_avg: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut PoseNetwork, lr: f64) {
        let (a, eps) = (self.config.alpha as f32, self.config.eps as f32);
        let lr = lr as f32;
        let state = &mut self.square_avg;
        let mut i = 0;
        net.visit_mut("", &mut |_, s| {
            let StateMut::Param(p) = s else { return };
            if state.len() <= i {
                state.push(vec![0.0; p.len()]);
            }
            let v = &mut state[i];
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *v = a * *v + (1.0 - a) * g * g;
                *w -= lr * g / (v.sqrt() + eps);
            }
            i += 1;
        });
    }
}
