//! AdamW with decoupled weight decay, bias correction, and per-parameter
//! moment state keyed by name.
//!
//! The optimizer never mutates a tensor in place: it reads the current
//! values and gradient, and installs a freshly constructed parameter tensor.
//! Parameters that carry no gradient (e.g. heads disabled by an ablation)
//! are skipped entirely — no moment state, no weight decay — so they stay
//! bit-identical to their initialization.

use super::config::TrainConfig;
use crate::error::Result;
use crate::model::{decays, ModelState};
use crate::numerics::Tensor;
use std::collections::BTreeMap;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> AdamW {
        AdamW { beta1, beta2, eps, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> AdamW {
        AdamW::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// Number of completed optimizer steps (the bias-correction clock).
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Advances the bias-correction clock; call once per batch, before the
    /// parameter updates of that batch.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One AdamW update for one named parameter. `decay` gates the decoupled
    /// weight-decay term; `grad_scale` pre-multiplies the gradient (used for
    /// global-norm clipping). Returns the new parameter values.
    ///
    ///   m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
    ///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
    pub fn update(
        &mut self,
        name: &str,
        theta: &[f64],
        grad: &[f64],
        lr_t: f64,
        decay: bool,
        grad_scale: f64,
    ) -> Vec<f64> {
        debug_assert_eq!(theta.len(), grad.len());
        debug_assert!(self.t >= 1, "begin_step must run before update");
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let wd = if decay { self.weight_decay } else { 0.0 };
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
        theta
            .iter()
            .enumerate()
            .map(|(i, &th)| {
                let g = grad[i] * grad_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                th - lr_t * (m_hat / (v_hat.sqrt() + eps)) - lr_t * wd * th
            })
            .collect()
    }

    /// Applies one optimizer step to every online parameter that received a
    /// gradient, replacing each updated tensor. Target parameters are never
    /// touched. Weight decay follows [`decays`]: layer-norm parameters, the
    /// loss weights and the temperature are exempt.
    pub fn step_model(
        &mut self,
        model: &mut ModelState,
        lr_t: f64,
        grad_scale: f64,
    ) -> Result<()> {
        self.begin_step();
        let mut failure = None;
        model.update_online(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            let Some(grad) = slot.grad() else { return };
            let next = self.update(&name, slot.values(), &grad, lr_t, decays(&name), grad_scale);
            match Tensor::param(slot.shape(), next) {
                Ok(t) => *slot = t,
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    /// Moment state in name order, for checkpointing.
    pub fn named_moments(&self) -> impl Iterator<Item = (&String, &Vec<f64>, &Vec<f64>)> {
        self.m.iter().map(|(name, m)| (name, m, &self.v[name]))
    }

    /// Reinstalls checkpointed state.
    pub fn restore(
        &mut self,
        t: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
