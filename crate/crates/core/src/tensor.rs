//! Dense row-major tensors and the eager (graph-free) primitive ops.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        };
        t.debug_check_finite();
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[1], vec![value]).expect("valid shape")
    }

    /// Builds a tensor from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("grad of {} values for tensor of {}", g.len(), self.data.len()),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` for a matrix, treating all leading dims as rows.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("rank >= 1");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.as_matrix();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn debug_check_finite(&self) {
        debug_assert!(self.is_finite(), "non-finite value in tensor of shape {:?}", self.shape);
    }

    /// Converts element type (used by oracles that rerun at `f64`).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

fn same_shape<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn require_matrix<T>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Standard matrix product of `a: m×k` and `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    kernels::gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), T::zero(), &mut out);
    Tensor::new(&[m, n], out)
}

/// `x·wᵀ` for `x: rows×in` and `w: out×in`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, inp) = x.as_matrix();
    let (out, inp2) = require_matrix("linear", w)?;
    if inp != inp2 {
        return Err(Error::shape("linear", format!("input width {inp} vs weight {inp2}")));
    }
    Tensor::new(&[rows, out], kernels::linear(&x.data, &w.data, rows, inp, out))
}

/// Pointwise operations available to the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Mul,
    Silu,
    Scale(T),
}

/// Applies a pointwise op. Binary ops need identical shapes, or a
/// one-element right-hand side which is broadcast as a scalar.
pub fn elementwise<T: Scalar>(
    op: Elementwise<T>,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let binary = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
        let b = b.ok_or_else(|| Error::shape("elementwise", "missing right operand"))?;
        let data = if b.numel() == 1 && a.numel() != 1 {
            let s = b.data[0];
            a.data.iter().map(|&x| f(x, s)).collect()
        } else {
            same_shape("elementwise", a, b)?;
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor::new(&a.shape, data)
    };
    match op {
        Elementwise::Add => binary(|x, y| x + y),
        Elementwise::Mul => binary(|x, y| x * y),
        Elementwise::Silu => Tensor::new(&a.shape, a.data.iter().map(|&x| kernels::silu(x)).collect()),
        Elementwise::Scale(c) => Tensor::new(&a.shape, a.data.iter().map(|&x| x * c).collect()),
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(Elementwise::Add, a, Some(b))
}

pub fn silu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    elementwise(Elementwise::Silu, a, None).expect("unary op")
}

/// Softmax over the last dimension, max-subtracted.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (_, cols) = x.as_matrix();
    let mut data = x.data.clone();
    data.chunks_exact_mut(cols).for_each(kernels::softmax_in_place);
    Tensor::new(&x.shape, data).expect("same shape")
}

/// `x / sqrt(mean(x²) + eps) · gain` along the last dimension.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (rows, d) = x.as_matrix();
    if gain.shape != [d] {
        return Err(Error::shape("rmsnorm", format!("gain {:?} for width {d}", gain.shape)));
    }
    let mut out = vec![T::zero(); x.numel()];
    let mut inv = vec![T::zero(); rows];
    kernels::rmsnorm_rows(&x.data, &gain.data, eps, &mut out, &mut inv);
    Tensor::new(&x.shape, out)
}
