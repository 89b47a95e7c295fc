//! AdamW and learning-rate schedules.
//!
//! AdamW with decoupled weight decay is used for every training stage; the
//! schedule kinds cover both pretraining stages (warmup then linear or
//! cosine decay to a floor).

use std::collections::HashMap;

use crate::error::{Result, VfmError};
use crate::params::{GradMap, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper) -> Self {
        OptimizerState { hyper, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
            _ => None,
        }
    }

    /// Deterministic (sorted) view of all moment buffers, for checkpointing.
    pub fn export(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.clone(), self.m[n].clone(), self.v[n].clone()))
            .collect()
    }

    pub fn import(hyper: AdamHyper, step: u64, entries: Vec<(String, Vec<f64>, Vec<f64>)>) -> Self {
        let mut s = OptimizerState::new(hyper);
        s.step = step;
        for (n, m, v) in entries {
            s.m.insert(n.clone(), m);
            s.v.insert(n, v);
        }
        s
    }
}

/// One decoupled-weight-decay Adam update over every parameter that has a
/// gradient. `lr == 0` leaves parameters untouched but still advances the
/// moment accumulators and step counter.
pub fn adamw_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &GradMap<F>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(VfmError::invalid(format!("negative learning rate {lr}")));
    }
    for (name, grad) in grads {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(VfmError::NonFinite { what: format!("gradient of `{name}`"), step: None });
        }
    }
    state.step += 1;
    let t = state.step;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);

    // Iterate the store's insertion order so update order is deterministic.
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let Some(grad) = grads.get(&name) else { continue };
        let param = store.get_mut(&name).expect("name from store");
        if grad.len() != param.numel() {
            return Err(VfmError::shape(
                "adamw_step",
                format!("grad len {} vs param `{}` numel {}", grad.len(), name, param.numel()),
            ));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        debug_assert_eq!(m.len(), param.numel());
        let data = param.data_mut();
        for i in 0..grad.len() {
            let g = grad[i].to_f64c();
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let p = data[i].to_f64c();
            let upd = mhat / (vhat.sqrt() + h.eps) + h.weight_decay * p;
            data[i] = F::cast(p - lr * upd);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayKind {
    Linear,
    Cosine,
}

/// Warmup-then-decay schedule: linear 0 -> base over the warmup, then the
/// chosen decay from base down to `floor_lr` at `total_steps`. Steps past
/// `total_steps` clamp to the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub kind: DecayKind,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.floor_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        match self.kind {
            DecayKind::Linear => self.base_lr + (self.floor_lr - self.base_lr) * frac,
            DecayKind::Cosine => {
                self.floor_lr
                    + (self.base_lr - self.floor_lr)
                        * 0.5
                        * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}
