//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are appended to the tape in execution order, so the tape is
//! always topologically sorted. `backward` walks it once in reverse; a
//! second call is an error. Gradients fan in additively.

use crate::error::{Error, Result};
use crate::hadamard::HadamardPlan;
use crate::kernels::{self, HeadLayout};
use crate::quant::{self, ActivationBits};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantKind {
    TernaryWeights,
    Activations(ActivationBits),
}

/// Batch geometry for sequence ops: rows are `batch × seq`, sequence-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
}

impl SeqLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sum(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        head_dim: usize,
        positions: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: HeadLayout,
        seq: SeqLayout,
        probs: Vec<T>,
    },
    Hadamard(Var),
    Quantizer(Var, QuantKind),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        count: usize,
        probs: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation with one-shot reverse pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients, for evaluation.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of quantizer (straight-through) nodes recorded.
    pub fn quantizer_count(&self) -> usize {
        self.quantizer_kinds().len()
    }

    pub fn quantizer_kinds(&self) -> Vec<QuantKind> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Quantizer(_, kind) => Some(kind),
                _ => None,
            })
            .collect()
    }

    /// Number of Hadamard-rotation nodes recorded.
    pub fn hadamard_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Hadamard(_)))
            .count()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.debug_check_finite();
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; tracks gradients when the tensor requires them.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t.with_requires_grad(false), Op::Leaf, rg)
    }

    /// Records a copy of a parameter tensor.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x·wᵀ` with `w` stored `out×in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = crate::tensor::linear(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Linear(x, w), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = crate::tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = crate::tensor::elementwise(
            crate::tensor::Elementwise::Mul,
            self.value(a),
            Some(self.value(b)),
        )?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value =
            crate::tensor::elementwise(crate::tensor::Elementwise::Scale(c), self.value(a), None)
                .expect("unary op");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = crate::tensor::silu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = crate::tensor::softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let (rows, d) = xt.as_matrix();
        if self.value(gain).shape() != [d] {
            return Err(Error::shape("rmsnorm", "gain width differs from input"));
        }
        let mut out = vec![T::zero(); xt.numel()];
        let mut inv_rms = vec![T::zero(); rows];
        kernels::rmsnorm_rows(xt.data(), self.value(gain).data(), eps, &mut out, &mut inv_rms);
        let value = Tensor::new(xt.shape(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Gathers rows of `table` (`vocab×d`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = tt.as_matrix();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    what: "token id",
                    value: id,
                    lo: 0,
                    hi: vocab - 1,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotary position embedding on each head of width `head_dim`; row `r`
    /// is at position `r % seq`.
    pub fn rope(&mut self, x: Var, head_dim: usize, seq: SeqLayout) -> Result<Var> {
        let xt = self.value(x);
        let (rows, width) = xt.as_matrix();
        if rows != seq.rows() || width % head_dim != 0 || head_dim % 2 != 0 {
            return Err(Error::shape("rope", format!("{rows}×{width} with head_dim {head_dim}")));
        }
        let positions: Vec<usize> = (0..rows).map(|r| r % seq.seq).collect();
        let mut data = xt.data().to_vec();
        kernels::rope_rows(&mut data, width, head_dim, &positions, T::one());
        let value = Tensor::new(xt.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                head_dim,
                positions,
            },
            rg,
        ))
    }

    /// Causal grouped-query attention over each sequence of the batch.
    pub(crate) fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: HeadLayout,
        seq: SeqLayout,
    ) -> Result<Var> {
        let (qr, qw) = self.value(q).as_matrix();
        let (kr, kw) = self.value(k).as_matrix();
        let (vr, vw) = self.value(v).as_matrix();
        if qw != layout.q_width()
            || kw != layout.kv_width()
            || vw != layout.kv_width()
            || qr != seq.rows()
            || kr != qr
            || vr != qr
        {
            return Err(Error::shape("attention", "q/k/v widths disagree with head layout"));
        }
        let rg = self.rg(&[q, k, v]);
        let s = seq.seq;
        let mut out = vec![T::zero(); qr * qw];
        let per_seq_probs = layout.heads * s * s;
        let mut probs = if rg {
            vec![T::zero(); seq.batch * per_seq_probs]
        } else {
            Vec::new()
        };
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..seq.batch {
            let p = if rg {
                Some(&mut probs[b * per_seq_probs..(b + 1) * per_seq_probs])
            } else {
                None
            };
            kernels::causal_attention(
                &qd[b * s * qw..(b + 1) * s * qw],
                &kd[b * s * kw..(b + 1) * s * kw],
                &vd[b * s * kw..(b + 1) * s * kw],
                s,
                s,
                0,
                layout,
                &mut out[b * s * qw..(b + 1) * s * qw],
                p,
            );
        }
        let value = Tensor::new(&[qr, qw], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                seq,
                probs,
            },
            rg,
        ))
    }

    /// Orthonormal Hadamard transform along the feature dimension.
    pub fn hadamard_rows(&mut self, x: Var) -> Result<Var> {
        let value = crate::hadamard::fht_rows(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Hadamard(x), rg))
    }

    /// Ternarized copy of a weight matrix (straight-through backward).
    pub fn ternary_weights(&mut self, w: Var) -> Var {
        let wt = self.value(w);
        let mut out = vec![T::zero(); wt.numel()];
        quant::ternary_dequant_into(wt.data(), &mut out);
        let value = Tensor::new(wt.shape(), out).expect("same shape");
        let rg = self.rg(&[w]);
        self.push(value, Op::Quantizer(w, QuantKind::TernaryWeights), rg)
    }

    /// Per-token activation quantization (straight-through backward).
    pub fn quantize_activations(&mut self, x: Var, bits: ActivationBits) -> Var {
        let xt = self.value(x);
        let (_, d) = xt.as_matrix();
        let mut out = vec![T::zero(); xt.numel()];
        quant::quantize_rows_into(xt.data(), d, bits, &mut out);
        let value = Tensor::new(xt.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Quantizer(x, QuantKind::Activations(bits)), rg)
    }

    /// Mean token cross-entropy (nats) of `logits` (`rows×vocab`); `None`
    /// targets are padding and excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lt = self.value(logits);
        let (rows, vocab) = lt.as_matrix();
        if rows != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} logit rows for {} targets", targets.len()),
            ));
        }
        let rg = self.rg(&[logits]);
        let mut probs = if rg { vec![T::zero(); rows * vocab] } else { Vec::new() };
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::OutOfRange {
                    what: "target id",
                    value: t,
                    lo: 0,
                    hi: vocab - 1,
                });
            }
            let row = lt.row(r);
            total += row_nll(row, t).to_f64().unwrap();
            count += 1;
            if rg {
                let pr = &mut probs[r * vocab..(r + 1) * vocab];
                pr.copy_from_slice(row);
                kernels::softmax_in_place(pr);
            }
        }
        if count == 0 {
            return Err(Error::Empty("cross-entropy over zero unmasked targets"));
        }
        let value = Tensor::scalar(T::from_f64(total / count as f64).unwrap());
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
                probs,
            },
            rg,
        ))
    }

    /// `Σ cᵢ·xᵢ` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, c) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            total += c * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Propagates `d loss / d v` to every gradient-tracking node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            backprop_node(&self.nodes, id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }
}

/// `logsumexp(row) − row[target]`.
pub(crate) fn row_nll<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - row[target]
}

/// Gradient buffer for `v`, allocated on first touch; `None` when `v` does
/// not track gradients.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).as_matrix();
            let (_, n) = val(*b).as_matrix();
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::gemm(m, n, k, dy, (n, 1), val(*b).data(), (1, n), T::one(), ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::gemm(k, m, n, val(*a).data(), (1, k), dy, (n, 1), T::one(), gb);
            }
        }
        Op::Linear(x, w) => {
            let (rows, inp) = val(*x).as_matrix();
            let (out, _) = val(*w).as_matrix();
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::gemm(rows, out, inp, dy, (out, 1), val(*w).data(), (inp, 1), T::one(), gx);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                kernels::gemm(out, rows, inp, dy, (1, out), val(*x).data(), (inp, 1), T::one(), gw);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(g) = slot(nodes, grads, *v) {
                    add_into(g, dy);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(val(*b).data()) {
                    *g += d * o;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((g, &d), &o) in gb.iter_mut().zip(dy).zip(val(*a).data()) {
                    *g += d * o;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(g) = slot(nodes, grads, *a) {
                for (g, &d) in g.iter_mut().zip(dy) {
                    *g += d * *c;
                }
            }
        }
        Op::Silu(a) => {
            if let Some(g) = slot(nodes, grads, *a) {
                for ((g, &d), &x) in g.iter_mut().zip(dy).zip(val(*a).data()) {
                    *g += d * kernels::silu_grad(x);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(g) = slot(nodes, grads, *a) {
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        Op::Softmax(a) => {
            let y = &nodes[id].value;
            let (_, cols) = y.as_matrix();
            if let Some(g) = slot(nodes, grads, *a) {
                for ((gr, yr), dr) in g
                    .chunks_exact_mut(cols)
                    .zip(y.data().chunks_exact(cols))
                    .zip(dy.chunks_exact(cols))
                {
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for ((g, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *g += p * (d - dot);
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xt = val(*x);
            let gt = val(*gain).data();
            let (_, d) = xt.as_matrix();
            let dt = T::from_usize(d).unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, ((gr, xr), dr)) in gx
                    .chunks_exact_mut(d)
                    .zip(xt.data().chunks_exact(d))
                    .zip(dy.chunks_exact(d))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    let dot: T = xr.iter().zip(dr).zip(gt).map(|((&x, &d), &g)| x * d * g).sum();
                    let coef = inv * inv * inv * dot / dt;
                    for (((g, &x), &d), &w) in gr.iter_mut().zip(xr).zip(dr).zip(gt) {
                        *g += d * w * inv - x * coef;
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (r, (xr, dr)) in xt.data().chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
                    let inv = inv_rms[r];
                    for ((g, &x), &d) in gg.iter_mut().zip(xr).zip(dr) {
                        *g += d * x * inv;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let (_, d) = val(*table).as_matrix();
            if let Some(g) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                }
            }
        }
        Op::Rope {
            x,
            head_dim,
            positions,
        } => {
            let (_, width) = val(*x).as_matrix();
            if let Some(g) = slot(nodes, grads, *x) {
                let mut back = dy.to_vec();
                kernels::rope_rows(&mut back, width, *head_dim, positions, -T::one());
                add_into(g, &back);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            seq,
            probs,
        } => attention_backward(nodes, grads, dy, (*q, *k, *v), *layout, *seq, probs),
        Op::Hadamard(x) => {
            let (_, n) = val(*x).as_matrix();
            if let Some(g) = slot(nodes, grads, *x) {
                let mut back = dy.to_vec();
                HadamardPlan::new(n)
                    .and_then(|p| p.apply_rows(&mut back))
                    .expect("validated on forward");
                add_into(g, &back);
            }
        }
        Op::Quantizer(x, _) => {
            if let Some(g) = slot(nodes, grads, *x) {
                add_into(g, &quant::ste_gradient(dy));
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            count,
            probs,
        } => {
            let (_, vocab) = val(*logits).as_matrix();
            let scale = dy[0] / T::from_usize(*count).unwrap();
            if let Some(g) = slot(nodes, grads, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let gr = &mut g[r * vocab..(r + 1) * vocab];
                    for (g, &p) in gr.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *g += p * scale;
                    }
                    gr[t] -= scale;
                }
            }
        }
        Op::WeightedSum(terms) => {
            for &(v, c) in terms {
                if let Some(g) = slot(nodes, grads, v) {
                    g[0] += c * dy[0];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    dy: &[T],
    (q, k, v): (Var, Var, Var),
    layout: HeadLayout,
    seq: SeqLayout,
    probs: &[T],
) {
    let hd = layout.head_dim;
    let (qw, kw) = (layout.q_width(), layout.kv_width());
    let s = seq.seq;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let (qd, kd, vd) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dp = vec![T::zero(); s];
    for b in 0..seq.batch {
        let base = b * s;
        for h in 0..layout.heads {
            let g = h / layout.group();
            let pb = &probs[(b * layout.heads + h) * s * s..(b * layout.heads + h + 1) * s * s];
            for i in 0..s {
                let prow = &pb[i * s..(i + 1) * s];
                let doi = &dy[(base + i) * qw + h * hd..(base + i) * qw + (h + 1) * hd];
                let mut dot = T::zero();
                for j in 0..=i {
                    let vj = &vd[(base + j) * kw + g * hd..(base + j) * kw + (g + 1) * hd];
                    dp[j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot += prow[j] * dp[j];
                    let dvj = &mut dv[(base + j) * kw + g * hd..(base + j) * kw + (g + 1) * hd];
                    for (o, &d) in dvj.iter_mut().zip(doi) {
                        *o += prow[j] * d;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let qi = (base + i) * qw + h * hd;
                    let kj = (base + j) * kw + g * hd;
                    for t in 0..hd {
                        dq[qi + t] += ds * kd[kj + t];
                        dk[kj + t] += ds * qd[qi + t];
                    }
                }
            }
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(g) = slot(nodes, grads, var) {
            add_into(g, &buf);
        }
    }
}
