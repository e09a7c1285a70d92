//! A small dense-array substrate with reverse-mode automatic differentiation,
//! sized for desk-scale training in double precision.
//!
//! [`Tensor`] is an immutable row-major f64 array with cheap clones.
//! [`graph::Graph`] records forward ops and their vector-Jacobian products on
//! a tape; [`graph::Graph::backward`] replays it in reverse. Convolutions and
//! the other spatial kernels live in [`conv`].

pub mod conv;
pub mod graph;
pub mod params;

pub use graph::{Graph, Var};
pub use params::ParamSet;

use std::sync::Arc;

use crate::error::{FpsError, Result};

/// Immutable row-major f64 array. Clones share the backing buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FpsError::shape(
                format!("{n} values for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Tensor::new(shape.to_vec(), data).expect("shape/data length mismatch")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Extract the single element of a scalar (or length-1) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer, new shape.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Replace one element, copying the buffer. Intended for finite-difference
    /// probes, not hot paths.
    pub fn with_value_at(&self, idx: usize, v: f64) -> Tensor {
        let mut data = self.to_vec();
        data[idx] = v;
        Tensor::from_vec(&self.shape, data)
    }

    pub fn rand_uniform(
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Tensor {
        use rand::Rng;
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }
}
