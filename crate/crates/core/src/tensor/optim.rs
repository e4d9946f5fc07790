use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{BmgfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient of every decayed parameter.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Adam moment buffers for the trainable parameters of one store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    /// Names of the tracked parameters, in store order.
    pub names: Vec<String>,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Tracks every parameter that is trainable at construction time.
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let tracked: Vec<_> = params.ids().filter(|&id| params.trainable(id)).collect();
        OptimizerState {
            config,
            step: 0,
            names: tracked.iter().map(|&id| params.name(id).to_string()).collect(),
            first_moment: tracked.iter().map(|&id| vec![0.0; params.tensor(id).numel()]).collect(),
            second_moment: tracked.iter().map(|&id| vec![0.0; params.tensor(id).numel()]).collect(),
        }
    }

    /// One bias-corrected Adam update. Gradients are read, not cleared.
    pub fn adam_step(&mut self, params: &mut ParamStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (k, name) in self.names.iter().enumerate() {
            let id = params
                .id(name)
                .ok_or_else(|| BmgfError::Contract(format!("optimizer tracks unknown parameter {name}")))?;
            let decay = params.param(id).decay;
            let tensor = params.tensor_mut(id);
            let (m, v) = (&mut self.first_moment[k], &mut self.second_moment[k]);
            if m.len() != tensor.numel() {
                return Err(BmgfError::Contract(format!("moment buffer shape mismatch for {name}")));
            }
            let grad = tensor
                .grad()
                .ok_or_else(|| BmgfError::Contract(format!("parameter {name} has no gradient")))?
                .to_vec();
            let values = tensor.data_mut();
            for i in 0..values.len() {
                let g = if decay { grad[i] + weight_decay * values[i] } else { grad[i] };
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_grad_l2(params: &mut ParamStore, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(BmgfError::Contract(format!("clip threshold must be positive, got {threshold}")));
    }
    let ids: Vec<_> = params.ids().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| params.tensor(id).grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for id in ids {
            if let Some(g) = params.tensor_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    Ok(norm)
}
