//! Named, ordered parameters.
//!
//! A [`ParamStore`] keeps insertion order, which fixes the alignment used by
//! the optimizer state and the byte layout of checkpoints. Every `Param`
//! carries a process-unique id so a graph can recognise repeated bindings;
//! cloning a store mints fresh ids, keeping clones independent.

use super::Tensor;
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

static PARAM_IDS: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    PARAM_IDS.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Param {
    name: String,
    value: Tensor,
    id: u64,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            value: self.value.clone(),
            id: next_id(),
        }
    }
}

#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its stable index.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArg {
                op: "param_store",
                msg: format!("duplicate parameter name {name:?}"),
            });
        }
        self.params.push(Param {
            name: name.to_string(),
            value: value.constant(),
            id: next_id(),
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, index: usize, value: Tensor) -> Result<()> {
        let p = &mut self.params[index];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_store.set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value.constant();
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArg {
                op: "param_store.set_by_name",
                msg: format!("no parameter named {name:?}"),
            })?;
        self.set_value(idx, value)
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
