//! Dense f64 tensors and the reverse-mode tape they are differentiated on.
//!
//! Everything in the crate is built from [`Tensor`] values (plain row-major
//! storage) and [`Tape`] nodes (define-by-run graph rebuilt on every forward
//! pass). All arithmetic is 64-bit; non-finite values are rejected at op
//! boundaries.

mod lstm;
mod optim;
mod tape;

pub use lstm::{lstm_forward, BoundLstm, LstmParams};
pub use optim::{global_grad_norm, OptAlgorithm, OptimizerState};
pub use tape::{Binder, NodeId, Padding, Tape};

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major f64 tensor.
///
/// `grad` is populated by the training loop after a backward pass; it always
/// mirrors `data` in length when present.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Uniform init on `[lo, hi)`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Zero-mean normal init via Box-Muller.
    pub fn normal<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix (rank-2) tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix (rank-2) tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Overwrite the payload in place, re-validating finiteness.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot replace {} elements with {}",
                self.data.len(),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor update".into()));
        }
        self.data = data;
        Ok(())
    }

    /// Mutable payload access for optimizers; callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Element access by multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }
}

/// Optimizer algorithm tag, also used by train configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}
