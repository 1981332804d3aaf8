//! Quantizers used by quantization-aware training.
//!
//! Weights are ternarized per tensor: `α = mean(|w|)`, codes in `{-1, 0, +1}`
//! with threshold `α/2`. Activations are quantized per token row with
//! `s = max(|x|)`:
//!
//! * 8-bit: `round(clip(x/s·127, -128, 127))·s/127`
//! * 4-bit: `round(clip(x/s·7, -8, 7))·s/7`
//!
//! `round` is half-away-from-zero. Rows with `s < 1e-8` become zeros.
//! Both quantizers use the straight-through estimator: the backward pass
//! treats them as the identity, with no gradient clipping.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows whose max magnitude falls below this are quantized to zero.
pub const SCALE_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationBits {
    Four,
    Eight,
}

impl ActivationBits {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            4 => Ok(ActivationBits::Four),
            8 => Ok(ActivationBits::Eight),
            other => Err(Error::InvalidBits(other)),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            ActivationBits::Four => 4,
            ActivationBits::Eight => 8,
        }
    }

    /// Largest positive grid level (127 or 7).
    pub fn q_max(self) -> f64 {
        match self {
            ActivationBits::Four => 7.0,
            ActivationBits::Eight => 127.0,
        }
    }

    /// Most negative grid level (-128 or -8).
    pub fn q_min(self) -> f64 {
        -self.q_max() - 1.0
    }
}

/// Ternary codes plus the per-tensor scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryWeights<T> {
    shape: Vec<usize>,
    codes: Vec<i8>,
    alpha: T,
}

impl<T: Scalar> TernaryWeights<T> {
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dequantize(&self) -> Tensor<T> {
        let data = self
            .codes
            .iter()
            .map(|&c| T::from_i8(c).unwrap() * self.alpha)
            .collect();
        Tensor::new(&self.shape, data).expect("shape preserved")
    }
}

/// `α = mean(|w|)` accumulated sequentially in `T`.
pub(crate) fn mean_abs<T: Scalar>(w: &[T]) -> T {
    let mut total = T::zero();
    for &v in w {
        total += v.abs();
    }
    total / T::from_usize(w.len()).unwrap()
}

pub(crate) fn ternary_code<T: Scalar>(w: T, alpha: T) -> i8 {
    let threshold = alpha * T::lit(0.5);
    if w > threshold {
        1
    } else if w < -threshold {
        -1
    } else {
        0
    }
}

pub fn ternary_quantize<T: Scalar>(w: &Tensor<T>) -> TernaryWeights<T> {
    let alpha = mean_abs(w.data());
    let codes = if alpha == T::zero() {
        vec![0; w.numel()]
    } else {
        w.data().iter().map(|&v| ternary_code(v, alpha)).collect()
    };
    TernaryWeights {
        shape: w.shape().to_vec(),
        codes,
        alpha,
    }
}

/// Dequantized ternary matrix, written straight into `out`.
pub(crate) fn ternary_dequant_into<T: Scalar>(w: &[T], out: &mut [T]) {
    let alpha = mean_abs(w);
    for (o, &v) in out.iter_mut().zip(w) {
        *o = if alpha == T::zero() {
            T::zero()
        } else {
            T::from_i8(ternary_code(v, alpha)).unwrap() * alpha
        };
    }
}

/// Activations projected onto the low-bit grid (still stored as floats).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivations<T> {
    pub values: Tensor<T>,
    pub scale_per_token: Vec<T>,
    pub bits: ActivationBits,
}

/// Quantizes each row of width `d` of `x` into `out`; returns the scales.
pub(crate) fn quantize_rows_into<T: Scalar>(
    x: &[T],
    d: usize,
    bits: ActivationBits,
    out: &mut [T],
) -> Vec<T> {
    let q_max = T::lit(bits.q_max());
    let q_min = T::lit(bits.q_min());
    let eps = T::lit(SCALE_EPSILON);
    let mut scales = Vec::with_capacity(x.len() / d);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let s = xr.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        scales.push(s);
        if s < eps {
            or.iter_mut().for_each(|o| *o = T::zero());
            continue;
        }
        let step = s / q_max;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v / s * q_max).max(q_min).min(q_max).round() * step;
        }
    }
    scales
}

pub fn quantize_activations<T: Scalar>(x: &Tensor<T>, bits: u32) -> Result<QuantizedActivations<T>> {
    let bits = ActivationBits::from_bits(bits)?;
    let (_, d) = x.as_matrix();
    let mut out = vec![T::zero(); x.numel()];
    let scale_per_token = quantize_rows_into(x.data(), d, bits, &mut out);
    Ok(QuantizedActivations {
        values: Tensor::new(x.shape(), out)?,
        scale_per_token,
        bits,
    })
}

/// Straight-through gradient: the quantizer is the identity for backprop.
pub fn ste_gradient<T: Scalar>(upstream: &[T]) -> Vec<T> {
    upstream.to_vec()
}
