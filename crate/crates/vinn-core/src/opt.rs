//! Adam optimizer with decoupled weight decay and the cosine-annealing
//! warm-restart learning-rate schedule.
//!
//! Decay multiplies the weights directly (never folded into the gradient),
//! so a zero-gradient weight still shrinks by `(1 − lr·λ)` each step. A
//! non-finite gradient aborts the whole step before any parameter moves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{FeatureMap, Real};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptConfig {
    /// Peak learning rate fed to the schedule.
    pub lr: f64,
    /// First-moment decay (the paper's "momentum").
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay λ.
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            lr: 0.001,
            beta1: 0.95,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error)]
pub enum OptError {
    #[error("non-finite gradient for parameter {0}; step aborted")]
    NanGradient(String),
}

/// Adam moment state, aligned with a [`ParamStore`] by parameter id.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    cfg: OptConfig,
    m: Vec<FeatureMap<T>>,
    v: Vec<FeatureMap<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: OptConfig, store: &ParamStore<T>) -> Adam<T> {
        let zeros: Vec<FeatureMap<T>> = (0..store.len())
            .map(|id| FeatureMap::zeros(store.get(id).dim()))
            .collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptConfig {
        &self.cfg
    }

    /// Apply one update with the given learning rate. `grads[id]` is the
    /// gradient for parameter `id` (None means zero gradient — the weight
    /// still decays and the moments still update). Any non-finite gradient
    /// aborts the step with every parameter untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<FeatureMap<T>>],
        lr: f64,
    ) -> Result<(), OptError> {
        assert_eq!(grads.len(), store.len(), "gradient slots vs parameters");
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(OptError::NanGradient(store.entry(id).name.clone()));
                }
            }
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (nb1, nb2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.cfg.eps);
        let decay = T::from_f64(lr * self.cfg.weight_decay);
        let (bc1t, bc2t) = (T::from_f64(bc1), T::from_f64(bc2));

        for id in 0..store.len() as ParamId {
            if !store.entry(id).trainable {
                continue;
            }
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let w = store.get_mut(id);
            match &grads[id] {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                        *m = b1t * *m + nb1 * g;
                    });
                    ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                        *v = b2t * *v + nb2 * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|m| b1t * m);
                    v.mapv_inplace(|v| b2t * v);
                }
            }
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                let m_hat = m / bc1t;
                let v_hat = v / bc2t;
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *w;
            });
        }
        Ok(())
    }
}

/// Cosine annealing within one cycle:
/// `lr = lr_min + (lr_max − lr_min)·(1 + cos(π·step/cycle))/2`.
pub fn cosine_lr(step_in_cycle: usize, cycle_len: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(step_in_cycle < cycle_len, "step must lie inside the cycle");
    let frac = step_in_cycle as f64 / cycle_len as f64;
    lr_min + (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Warm restarts: cycles of length t0, t0·mult, t0·mult², … so the rate
/// resets to `lr_max` at epochs t0, t0·(1+mult), … (10, 30, 70 for the
/// defaults).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WarmRestartSchedule {
    pub t0: usize,
    pub mult: usize,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl WarmRestartSchedule {
    /// The cycle containing `epoch`: (start epoch, length).
    pub fn cycle_of(&self, epoch: usize) -> (usize, usize) {
        let mut start = 0usize;
        let mut len = self.t0.max(1);
        while epoch >= start + len {
            start += len;
            len *= self.mult.max(1);
        }
        (start, len)
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let (start, len) = self.cycle_of(epoch);
        cosine_lr(epoch - start, len, self.lr_max, self.lr_min)
    }
}
