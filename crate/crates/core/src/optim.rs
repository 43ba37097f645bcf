//! Adam with bias correction over all site tensors.

use crate::error::{FttnError, Result};
use crate::model::MpsClassifier;
use crate::training::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per site.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

pub fn adam_step(model: &mut MpsClassifier, grads: &GradientSet, state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    let sizes: Vec<usize> = model.sites().iter().map(|s| s.len()).collect();
    let grad_sizes: Vec<usize> = grads.sites().iter().map(|g| g.len()).collect();
    if sizes != grad_sizes {
        return Err(FttnError::DimensionMismatch("gradient set does not match model".into()));
    }
    if state.m.is_empty() {
        state.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
        state.v = state.m.clone();
    } else if state.m.iter().map(Vec::len).ne(sizes.iter().copied()) {
        return Err(FttnError::DimensionMismatch("optimizer state does not match model".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - config.beta1.powi(t);
    let correct2 = 1.0 - config.beta2.powi(t);
    for (k, g) in grads.sites().iter().enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for (((p, &g), m), v) in model.site_data_mut(k).iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / correct1;
            let v_hat = *v / correct2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}
