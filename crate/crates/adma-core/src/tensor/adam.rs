//! Adam with bias correction.

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    active: Vec<bool>,
    step: u64,
}

impl AdamState {
    /// Fresh moments for every parameter in the store.
    pub fn new(store: &ParamStore) -> Self {
        Self::with_scope(store, |_| true)
    }

    /// Fresh moments; parameters whose name fails the filter are frozen and
    /// never touched by [`AdamState::step`].
    pub fn with_scope(store: &ParamStore, in_scope: impl Fn(&str) -> bool) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.value().len()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.value().len()]).collect();
        let active = store.iter().map(|p| in_scope(p.name())).collect();
        Self { m, v, active, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// One update over the whole store. `grads` must align with the store's
    /// parameter order; frozen parameters ignore their gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::OptimizerMismatch {
                state: self.m.len().min(grads.len()),
                params: store.len(),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != store.get(i).value().shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.get(i).value().shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..store.len() {
            if !self.active[i] {
                continue;
            }
            let g = grads[i].data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let old = store.get(i).value().data();
            let mut updated = Vec::with_capacity(old.len());
            for j in 0..old.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                updated.push(old[j] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
            }
            let shape = store.get(i).value().shape().to_vec();
            store.set_value(i, Tensor::new(shape, updated)?)?;
        }
        Ok(())
    }
}
