//! AdamW with decoupled weight decay, global-norm clipping and a warmup/cosine schedule.

use crate::config::TrainConfig;
use crate::error::{MohdError, Result};
use crate::layers::ParamStore;

/// Learning rate at 1-based `step`: linear warmup, then cosine decay to `min_frac·base`.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64, min_frac: f64) -> f64 {
    let warmup = (warmup_frac * total as f64).ceil() as usize;
    if step <= warmup && warmup > 0 {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).clamp(0.0, 1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (min_frac + (1.0 - min_frac) * cos)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        norm
    }

    /// One update. Weight decay applies only to matrix and embedding parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(MohdError::shape("adamw", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = if store.kind(id).decays() { self.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (((p, mi), vi), gi) in store.get_mut(id).data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *p -= lr * (update + decay * *p);
            }
        }
        Ok(())
    }
}
