//! Dense f64 tensors plus a tape-based reverse-mode graph.
//!
//! Tensors are immutable values (shape + shared buffer). When an op runs on
//! a recording [`Graph`] the result remembers which node produced it, so a
//! later `backward` can walk the tape. The same tensor value can be fed to
//! any other graph; a graph only trusts node ids it issued itself.

mod adam;
mod checkpoint;
mod graph;
mod param;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_records, save_records, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, LN_EPS};
pub use param::{Param, ParamStore};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use std::sync::Arc;

/// Identifies a node on one specific graph's tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) graph: u64,
    pub(crate) node: usize,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    origin: Option<NodeRef>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::BadShape {
                op: "tensor",
                expected: format!("{} elements", numel(&shape)),
                shape: vec![data.len()],
            });
        }
        check_finite("tensor", &data)?;
        Ok(Self {
            shape,
            data: Arc::new(data),
            origin: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, origin: Option<NodeRef>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data, origin }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: Arc::new(vec![0.0; numel(shape)]),
            shape: shape.to_vec(),
            origin: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            data: Arc::new(vec![value; numel(shape)]),
            shape: shape.to_vec(),
            origin: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data: Vec<f64> = (0..numel(shape)).map(|i| f(i)).collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            origin: None,
        }
    }

    /// I.i.d. normal entries scaled by `std`, drawn from the given stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut StreamRng) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn buffer(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn origin(&self) -> Option<NodeRef> {
        self.origin
    }

    /// Scalar value of a shape-[1] tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::BadShape {
                op: "item",
                expected: "a single element".into(),
                shape: self.shape.clone(),
            })
        }
    }

    /// Row-major multi-index access; intended for tests and small readers.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Same value, no graph history.
    pub fn constant(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            origin: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl PartialEq for Tensor {
    /// Bitwise value equality (shape and every element); history is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_validate_shape_and_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::BadShape { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn scalar_item_round_trip() {
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }
}
