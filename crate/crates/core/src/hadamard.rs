//! Orthonormal fast Walsh–Hadamard transform.
//!
//! `H_0 = (1)` and `H_m = 1/√2 · [[H_{m-1}, H_{m-1}], [H_{m-1}, -H_{m-1}]]`.
//! The butterfly applies the `1/√2` factor at each of the `m` levels rather
//! than a single `1/√n` pass at the end, mirroring the recursive definition.
//! `H_m` is symmetric and orthogonal, so the transform is its own inverse
//! and its own adjoint.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Size descriptor for a transform of length `n = 2^m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HadamardPlan {
    n: usize,
    m: u32,
}

impl HadamardPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::TransformSize(n));
        }
        Ok(HadamardPlan {
            n,
            m: n.trailing_zeros(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn log2(&self) -> u32 {
        self.m
    }

    /// In-place transform of one vector of length `n`.
    pub fn apply<T: Scalar>(&self, x: &mut [T]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::shape(
                "fht",
                format!("vector of length {} for plan of size {}", x.len(), self.n),
            ));
        }
        let r = T::one() / T::lit(2.0).sqrt();
        let mut half = 1;
        while half < self.n {
            for block in x.chunks_exact_mut(2 * half) {
                let (lo, hi) = block.split_at_mut(half);
                for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                    let (u, v) = (*a, *b);
                    *a = (u + v) * r;
                    *b = (u - v) * r;
                }
            }
            half *= 2;
        }
        Ok(())
    }

    /// Applies the transform to every contiguous row of width `n`.
    pub fn apply_rows<T: Scalar>(&self, data: &mut [T]) -> Result<()> {
        if data.len() % self.n != 0 {
            return Err(Error::shape("fht_rows", "buffer is not a whole number of rows"));
        }
        data.chunks_exact_mut(self.n).try_for_each(|row| self.apply(row))
    }
}

/// `H_m · x` for a power-of-two length vector.
pub fn fht<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    let plan = HadamardPlan::new(x.len())?;
    let mut out = x.to_vec();
    plan.apply(&mut out)?;
    Ok(out)
}

/// Row-wise transform along the last (feature) dimension.
pub fn fht_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = x.as_matrix();
    let plan = HadamardPlan::new(n)?;
    let mut data = x.data().to_vec();
    plan.apply_rows(&mut data)?;
    Tensor::new(x.shape(), data)
}
