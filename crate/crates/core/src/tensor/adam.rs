use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 term: `weight_decay * param` is added to the gradient
    /// before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            hyper,
        }
    }

    pub fn for_tensor(t: &Tensor, hyper: AdamHyper) -> Self {
        Self::new(t.numel(), hyper)
    }
}

/// One bias-corrected Adam update of every parameter; gradients are zeroed
/// afterwards.
pub fn adam_step(params: &mut [&mut Tensor], states: &mut [AdamState]) -> Result<()> {
    if params.len() != states.len() {
        return dim_err(format!("{} parameters but {} optimizer states", params.len(), states.len()));
    }
    for (i, (p, s)) in params.iter().zip(states.iter()).enumerate() {
        if p.grad().is_none() {
            return contract_err(format!("parameter {i} has no gradient"));
        }
        if s.m.len() != p.numel() {
            return dim_err(format!("optimizer state {i} tracks {} values, parameter has {}", s.m.len(), p.numel()));
        }
    }
    for (p, s) in params.iter_mut().zip(states.iter_mut()) {
        s.t += 1;
        let h = s.hyper;
        let bc1 = 1.0 - h.beta1.powi(s.t as i32);
        let bc2 = 1.0 - h.beta2.powi(s.t as i32);
        let grad = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for k in 0..data.len() {
            let g = grad[k] + h.weight_decay * data[k];
            s.m[k] = h.beta1 * s.m[k] + (1.0 - h.beta1) * g;
            s.v[k] = h.beta2 * s.v[k] + (1.0 - h.beta2) * g * g;
            let m_hat = s.m[k] / bc1;
            let v_hat = s.v[k] / bc2;
            data[k] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        p.zero_grad();
    }
    Ok(())
}
