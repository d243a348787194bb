use serde::{Deserialize, Serialize};

use super::mlp::MlpParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers for decoupled-weight-decay Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: AdamWConfig,
}

impl AdamWState {
    pub fn new(param_count: usize, hyper: AdamWConfig) -> Self {
        AdamWState {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            hyper,
        }
    }

    /// One AdamW update in place. `groups` names contiguous parameter ranges
    /// (name, length) for error reporting; pass an empty slice for a single group.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], groups: &[(&str, usize)]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("adamw_step params", self.m.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::dim("adamw_step grads", params.len(), grads.len()));
        }
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {}",
                group_name(groups, pos)
            )));
        }
        let h = self.hyper;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * params[i]);
        }
        Ok(())
    }
}

fn group_name(groups: &[(&str, usize)], pos: usize) -> String {
    let mut off = 0;
    for (name, len) in groups {
        if pos < off + len {
            return format!("{name} (entry {})", pos - off);
        }
        off += len;
    }
    format!("parameter {pos}")
}

/// AdamW step on an MLP; errors name the offending layer.
pub fn adamw_step(p: &mut MlpParams, grads: &MlpParams, state: &mut AdamWState) -> Result<()> {
    if p.param_count() != grads.param_count() {
        return Err(Error::dim("adamw_step", p.param_count(), grads.param_count()));
    }
    let names: Vec<String> = (0..p.layers().len()).map(|i| format!("layer {i}")).collect();
    let groups: Vec<(&str, usize)> = p
        .layers()
        .iter()
        .zip(&names)
        .map(|(l, n)| (n.as_str(), l.input_dim() * l.output_dim() + l.output_dim()))
        .collect();
    let mut flat = p.flatten();
    state.step_flat(&mut flat, &grads.flatten(), &groups)?;
    p.assign_flat(&flat)
}
