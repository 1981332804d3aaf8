//! Slice-level numeric kernels shared by the eager tensor ops, the autodiff
//! graph and the cached decoder. Every path that must agree bit-for-bit goes
//! through these functions.

use crate::scalar::Scalar;

/// `c ← a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, with explicit
/// (row, column) strides for both operands. `c` is dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    beta: T,
    c: &mut [T],
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, a_strides), "gemm lhs out of bounds");
    assert!(b.len() >= extent(k, n, b_strides), "gemm rhs out of bounds");
    // SAFETY: extents checked above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = x·wᵀ` for `x: rows×inp`, `w: out×inp`.
pub(crate) fn linear<T: Scalar>(x: &[T], w: &[T], rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    gemm(rows, inp, out, x, (inp, 1), w, (1, inp), T::zero(), &mut y);
    y
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu / dx = σ(x)·(1 + x·(1 − σ(x)))
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise RMS normalisation. Writes `1/rms` per row into `inv_rms`.
pub(crate) fn rmsnorm_rows<T: Scalar>(
    x: &[T],
    gain: &[T],
    eps: T,
    y: &mut [T],
    inv_rms: &mut [T],
) {
    let d = gain.len();
    let dt = T::from_usize(d).unwrap();
    for (r, (xr, yr)) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).enumerate() {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / dt;
        let inv = T::one() / (ms + eps).sqrt();
        inv_rms[r] = inv;
        for ((o, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *o = v * inv * g;
        }
    }
}

pub(crate) const ROPE_BASE: f64 = 10_000.0;

/// Rotary embedding in the rotate-half layout: within each head, dimension
/// `i` pairs with `i + head_dim/2`. `sign = -1` applies the inverse rotation
/// (used by the backward pass).
pub(crate) fn rope_rows<T: Scalar>(
    x: &mut [T],
    width: usize,
    head_dim: usize,
    positions: &[usize],
    sign: T,
) {
    let half = head_dim / 2;
    let hd = T::from_usize(head_dim).unwrap();
    for (row, &pos) in x.chunks_exact_mut(width).zip(positions) {
        let p = T::from_usize(pos).unwrap();
        for i in 0..half {
            let freq = T::lit(ROPE_BASE).powf(-T::from_usize(2 * i).unwrap() / hd);
            let (sin, cos) = (p * freq).sin_cos();
            let sin = sin * sign;
            for head in row.chunks_exact_mut(head_dim) {
                let a = head[i];
                let b = head[i + half];
                head[i] = a * cos - b * sin;
                head[i + half] = a * sin + b * cos;
            }
        }
    }
}

/// Head layout for grouped-query attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct HeadLayout {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn group(&self) -> usize {
        self.heads / self.kv_heads
    }
}

/// Causal attention for one sequence. Query row `i` sits at absolute
/// position `offset + i` and may attend to key rows `0..=offset + i`.
/// `probs`, when given, receives the `[heads][nq][nk]` attention weights
/// (zeros at masked positions).
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    offset: usize,
    layout: HeadLayout,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let hd = layout.head_dim;
    let qw = layout.q_width();
    let kw = layout.kv_width();
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut scores = vec![T::zero(); nk];
    for h in 0..layout.heads {
        let g = h / layout.group();
        for i in 0..nq {
            let visible = (offset + i + 1).min(nk);
            let qi = &q[i * qw + h * hd..i * qw + (h + 1) * hd];
            for (j, s) in scores[..visible].iter_mut().enumerate() {
                let kj = &k[j * kw + g * hd..j * kw + (g + 1) * hd];
                *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            softmax_in_place(&mut scores[..visible]);
            let oi = &mut out[i * qw + h * hd..i * qw + (h + 1) * hd];
            oi.iter_mut().for_each(|o| *o = T::zero());
            for (j, &p) in scores[..visible].iter().enumerate() {
                let vj = &v[j * kw + g * hd..j * kw + (g + 1) * hd];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
            if let Some(pr) = probs.as_deref_mut() {
                let row = &mut pr[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                row[..visible].copy_from_slice(&scores[..visible]);
                row[visible..].iter_mut().for_each(|p| *p = T::zero());
            }
        }
    }
}
