use serde::{Deserialize, Serialize};

use crate::param::ParamStore;

/// Adam hyperparameters. Defaults: `lr = 2e-4`, `beta1 = 0.5`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    /// Parameters whose update was skipped because the gradient held NaN.
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            states: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Applies one bias-corrected Adam update to every parameter that has a
    /// gradient. Parameters without a gradient are treated as having a zero one.
    pub fn step(&mut self, store: &mut ParamStore) -> StepOutcome {
        if self.states.len() < store.len() {
            self.states.resize_with(store.len(), AdamState::default);
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        let mut outcome = StepOutcome::default();

        for (param, state) in store.iter_mut().zip(&mut self.states) {
            if !param.requires_grad {
                continue;
            }
            let n = param.value.numel();
            if state.first.len() != n {
                state.first = vec![0.0; n];
                state.second = vec![0.0; n];
            }
            let Some(grad) = param.grad.as_ref() else {
                continue;
            };
            if grad.data().iter().any(|g| g.is_nan()) {
                outcome.rejected.push(param.name.clone());
                continue;
            }
            for (((w, &g), m), v) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(&mut state.first)
                .zip(&mut state.second)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        outcome
    }
}
