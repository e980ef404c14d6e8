//! Dense tensors with a tape-based reverse-mode autodiff engine.
//!
//! Everything the model computes is expressed as operations on a [`Graph`],
//! which is rebuilt for every forward pass. Parameters live in a
//! [`ParamSet`] outside the graph and are copied in as leaves; after
//! [`Graph::backward`] their gradients are accumulated back into the set.
//!
//! The engine is generic over [`Real`] so that training runs in `f32`
//! while gradient checks run the exact same code in `f64`.

mod checkpoint;
mod graph;
mod gradcheck;
mod kernels;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_diff_check, param_grad_check, relative_error, GradCheckReport};
pub use graph::{AttnLayout, Graph, Var};
pub use optim::{AdamConfig, ParamId, ParamSet};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Contract { op, detail: detail.into() }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating point element type of the engine.
pub trait Real: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A·B + beta * C` on strided row/column views.
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds views of the slices'
    /// underlying buffers, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A dense row-major array with a gradient buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            ));
        }
        let grad = vec![T::zero(); numel];
        Ok(Tensor { shape, values, grad, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![T::zero(); numel], grad: vec![T::zero(); numel], requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let mut t = Self::zeros(shape);
        t.values.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], values: vec![v], grad: vec![T::zero()], requires_grad: false }
    }

    pub fn vector(values: Vec<T>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn item(&self) -> T {
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(self.grad.iter()).all(|v| v.is_finite())
    }

    /// Converts element type, keeping gradients.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
