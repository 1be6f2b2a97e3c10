//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the record once in reverse and leaves
//! `d(loss)/d(node)` in the gradient slot of every node that requires a
//! gradient. Model parameters live outside the graph in a [`ParamStore`] and
//! are bound into a graph with [`Graph::param`]; their gradients are pulled
//! back with [`ParamStore::accumulate_grads`].
//!
//! The primitive set is deliberately small: only what the Transformer models
//! and the estimator surrogate losses need. Broadcasting is limited to adding a
//! bias row to every row of a matrix.

mod check;
mod graph;
mod params;

pub use check::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport, WorstEntry};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore, Parameterized};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Dense tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} entries, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::matrix(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| normal.sample(rng)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-entry tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix; vectors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
