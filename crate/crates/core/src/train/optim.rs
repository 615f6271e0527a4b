use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine
/// annealing to `min` at `total`. Steps past `total` stay at `min`.
pub fn cosine_warmup_lr(step: usize, s: &LrSchedule) -> Result<f64> {
    if s.total <= s.warmup {
        return Err(Error::contract(format!(
            "total steps {} must exceed warmup steps {}",
            s.total, s.warmup
        )));
    }
    if !(s.min > 0.0 && s.min <= s.peak) {
        return Err(Error::contract(format!("need 0 < min lr {} ≤ peak lr {}", s.min, s.peak)));
    }
    if step < s.warmup {
        return Ok(s.peak * step as f64 / s.warmup as f64);
    }
    if step >= s.total {
        return Ok(s.min);
    }
    let theta = std::f64::consts::PI * (step - s.warmup) as f64 / (s.total - s.warmup) as f64;
    // Written from the peak side so lr(W) is exactly the peak.
    Ok((s.peak - 0.5 * (s.peak - s.min) * (1.0 - theta.cos())).max(s.min))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let z: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// One AdamW update. Decay is decoupled: `p ← p·(1 − lr·wd)` before the
/// bias-corrected Adam step. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamW) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::dim(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (p, g) in store.iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient of {} has shape {:?}, parameter {:?}",
                p.name,
                g.shape(),
                p.tensor.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, p) in store.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.tensor.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm ≤ 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
