//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::registry::{ParamId, ParamStore};
use crate::real::Real;

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
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Moments exist only for parameters that were trainable at construction.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub hp: AdamWConfig,
    step: u64,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(hp: AdamWConfig, store: &ParamStore<T>) -> Self {
        let state = store
            .registry
            .ids()
            .filter(|&id| store.registry.get(id).trainable)
            .map(|id| {
                let n = store.registry.get(id).numel();
                (
                    id,
                    Moments {
                        m: vec![T::zero(); n],
                        v: vec![T::zero(); n],
                    },
                )
            })
            .collect();
        Self { hp, step: 0, state }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// One update. Trainable parameters without a gradient entry are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Vec<T>>) -> Result<()> {
        for (&id, g) in grads {
            let entry = store.registry.get(id);
            if !self.state.contains_key(&id) {
                return Err(Error::GradNotTrainable(entry.name.clone()));
            }
            if g.len() != entry.numel() {
                return Err(Error::GradShape {
                    name: entry.name.clone(),
                    expected: entry.numel(),
                    got: g.len(),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let hp = self.hp;
        let c1 = T::from_f64(1.0 - hp.beta1.powf(t));
        let c2 = T::from_f64(1.0 - hp.beta2.powf(t));
        let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
        let (lr, eps) = (T::from_f64(hp.lr), T::from_f64(hp.eps));
        let decay = T::from_f64(1.0 - hp.lr * hp.weight_decay);
        for (&id, g) in grads {
            let st = self.state.get_mut(&id).unwrap();
            let p = store.value_mut(id);
            for i in 0..g.len() {
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
