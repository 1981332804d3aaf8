//! Quantized linear layers, transformer blocks and stochastic layer routing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::kernels::HeadLayout;
use crate::quant::{self, ActivationBits};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightMode {
    Ternary,
    FullPrecision,
}

/// Which linear-layer family a spec describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearKind {
    /// Plain full-precision projection.
    Standard,
    /// Ternary weights with low-bit activations.
    BitLinear,
    /// BitLinear preceded by the Hadamard rotation of its input.
    HBitLinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearLayerSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub weight_mode: WeightMode,
    pub activation_bits: Option<ActivationBits>,
    pub hadamard: bool,
}

impl LinearLayerSpec {
    pub fn new(
        in_features: usize,
        out_features: usize,
        weight_mode: WeightMode,
        activation_bits: Option<ActivationBits>,
        hadamard: bool,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config("linear layer with zero features".into()));
        }
        if hadamard && !in_features.is_power_of_two() {
            return Err(Error::TransformSize(in_features));
        }
        Ok(LinearLayerSpec {
            in_features,
            out_features,
            weight_mode,
            activation_bits,
            hadamard,
        })
    }

    pub fn standard(in_features: usize, out_features: usize) -> Self {
        Self::new(in_features, out_features, WeightMode::FullPrecision, None, false)
            .expect("non-zero features")
    }

    pub fn kind(&self) -> LinearKind {
        match (self.weight_mode, self.hadamard) {
            (_, true) => LinearKind::HBitLinear,
            (WeightMode::Ternary, false) => LinearKind::BitLinear,
            (WeightMode::FullPrecision, false) if self.activation_bits.is_some() => {
                LinearKind::BitLinear
            }
            (WeightMode::FullPrecision, false) => LinearKind::Standard,
        }
    }

    fn check(&self, x_cols: usize, w_shape: &[usize]) -> Result<()> {
        if x_cols != self.in_features || w_shape != [self.out_features, self.in_features] {
            return Err(Error::shape(
                "bitlinear",
                format!(
                    "input width {x_cols}, weight {w_shape:?}, spec {}→{}",
                    self.in_features, self.out_features
                ),
            ));
        }
        Ok(())
    }
}

/// Eager BitLinear: rotate (optional) → quantize activations (optional) →
/// ternarize weights (optional) → `x·Wᵀ`.
pub fn bitlinear_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &LinearLayerSpec,
    shadow_w: &Tensor<T>,
) -> Result<Tensor<T>> {
    spec.check(x.as_matrix().1, shadow_w.shape())?;
    let mut x = if spec.hadamard {
        crate::hadamard::fht_rows(x)?
    } else {
        x.clone()
    };
    if let Some(bits) = spec.activation_bits {
        x = quant::quantize_activations(&x, bits.bits())?.values;
    }
    match spec.weight_mode {
        WeightMode::Ternary => tensor::linear(&x, &quant::ternary_quantize(shadow_w).dequantize()),
        WeightMode::FullPrecision => tensor::linear(&x, shadow_w),
    }
}

/// Graph version of [`bitlinear_forward`]; both quantizers are
/// straight-through nodes.
pub fn bitlinear<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    spec: &LinearLayerSpec,
) -> Result<Var> {
    spec.check(g.value(x).as_matrix().1, g.value(w).shape())?;
    let mut x = x;
    if spec.hadamard {
        x = g.hadamard_rows(x)?;
    }
    if let Some(bits) = spec.activation_bits {
        x = g.quantize_activations(x, bits);
    }
    let w = match spec.weight_mode {
        WeightMode::Ternary => g.ternary_weights(w),
        WeightMode::FullPrecision => w,
    };
    g.linear(x, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleMode {
    /// `p(l) = p_max·(l/L)²`
    Raw,
    /// Raw values rescaled so that `Σ_l p(l) = 1`.
    SumNormalized,
}

/// Quadratic layer-dropout schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSchedule {
    pub p_max: f64,
    pub mode: ScheduleMode,
    pub layers: usize,
}

impl DropoutSchedule {
    pub fn new(p_max: f64, mode: ScheduleMode, layers: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_max) {
            return Err(Error::Config(format!("p_max {p_max} outside [0, 1]")));
        }
        if layers == 0 {
            return Err(Error::Config("schedule needs at least one layer".into()));
        }
        Ok(DropoutSchedule { p_max, mode, layers })
    }

    fn raw(&self, l: usize) -> f64 {
        let r = l as f64 / self.layers as f64;
        self.p_max * r * r
    }

    /// Skip probability of layer `l` (1-based).
    pub fn p(&self, l: usize) -> Result<f64> {
        if l == 0 || l > self.layers {
            return Err(Error::OutOfRange {
                what: "layer index",
                value: l,
                lo: 1,
                hi: self.layers,
            });
        }
        Ok(match self.mode {
            ScheduleMode::Raw => self.raw(l),
            ScheduleMode::SumNormalized => {
                let total: f64 = (1..=self.layers).map(|k| self.raw(k)).sum();
                if total == 0.0 {
                    0.0
                } else {
                    self.raw(l) / total
                }
            }
        })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        (1..=self.layers).map(|l| self.p(l).expect("in range")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Stochastic-depth operator. In training, one Bernoulli(`p`) draw decides
/// whether `h` passes through untouched; at inference the block always runs.
/// Returns the new state and whether the block was skipped.
pub fn layer_skip_apply<S, R, F>(
    h: S,
    block: F,
    p: f64,
    phase: Phase,
    rng: &mut R,
) -> Result<(S, bool)>
where
    R: Rng + ?Sized,
    F: FnOnce(S) -> Result<S>,
{
    match phase {
        Phase::Train => {
            let skip = rng.gen::<f64>() < p;
            if skip {
                Ok((h, true))
            } else {
                Ok((block(h)?, false))
            }
        }
        Phase::Infer => Ok((block(h)?, false)),
    }
}

/// Per-block shape and the linear-layer flavour used by every projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ffn_dim: usize,
    pub weight_mode: WeightMode,
    pub activation_bits: Option<ActivationBits>,
    pub hadamard: bool,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "heads {} not divisible by kv_heads {}",
                self.heads, self.kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("head dimension must be even for RoPE".into()));
        }
        if self.hadamard && !(self.hidden.is_power_of_two() && self.ffn_dim.is_power_of_two()) {
            return Err(Error::Config(format!(
                "Hadamard variants need power-of-two hidden ({}) and ffn_dim ({})",
                self.hidden, self.ffn_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub(crate) fn head_layout(&self) -> HeadLayout {
        HeadLayout {
            heads: self.heads,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim(),
        }
    }

    pub fn linear(&self, in_features: usize, out_features: usize) -> LinearLayerSpec {
        LinearLayerSpec::new(
            in_features,
            out_features,
            self.weight_mode,
            self.activation_bits,
            self.hadamard,
        )
        .expect("validated block config")
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    /// `[out, in]` shapes of the seven projections, in parameter order
    /// wq, wk, wv, wo, w_gate, w_up, w_down.
    pub fn projection_shapes(&self) -> [[usize; 2]; 7] {
        let (d, kv, f) = (self.hidden, self.kv_width(), self.ffn_dim);
        [[d, d], [kv, d], [kv, d], [d, d], [f, d], [f, d], [d, f]]
    }
}

/// Parameters of one transformer block (norm gains are `[hidden]`, every
/// projection is stored `out×in`).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

pub const BLOCK_PARAM_NAMES: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

impl<T: Scalar> BlockParams<T> {
    pub fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn register(&self, g: &mut Graph<T>) -> BlockVars {
        let [attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down] =
            self.tensors().map(|t| g.param(t));
        BlockVars {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            w_gate,
            w_up,
            w_down,
        }
    }
}

/// Graph handles of a registered [`BlockParams`].
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BlockVars {
    pub fn vars(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Pre-norm grouped-query self-attention with RoPE and a residual add.
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars,
    cfg: &BlockConfig,
    seq: SeqLayout,
) -> Result<Var> {
    let (d, kv) = (cfg.hidden, cfg.kv_width());
    let n = g.rmsnorm(x, p.attn_norm, T::lit(NORM_EPS))?;
    let q = bitlinear(g, n, p.wq, &cfg.linear(d, d))?;
    let k = bitlinear(g, n, p.wk, &cfg.linear(d, kv))?;
    let v = bitlinear(g, n, p.wv, &cfg.linear(d, kv))?;
    let q = g.rope(q, cfg.head_dim(), seq)?;
    let k = g.rope(k, cfg.head_dim(), seq)?;
    let a = g.attention(q, k, v, cfg.head_layout(), seq)?;
    let o = bitlinear(g, a, p.wo, &cfg.linear(d, d))?;
    g.add(x, o)
}

/// Pre-norm gated-SiLU feed-forward with a residual add.
pub fn ffn_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars,
    cfg: &BlockConfig,
) -> Result<Var> {
    let (d, f) = (cfg.hidden, cfg.ffn_dim);
    let n = g.rmsnorm(x, p.ffn_norm, T::lit(NORM_EPS))?;
    let gate = bitlinear(g, n, p.w_gate, &cfg.linear(d, f))?;
    let up = bitlinear(g, n, p.w_up, &cfg.linear(d, f))?;
    let act = g.silu(gate);
    let h = g.mul(act, up)?;
    let down = bitlinear(g, h, p.w_down, &cfg.linear(f, d))?;
    g.add(x, down)
}

/// Attention followed by the feed-forward sublayer.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars,
    cfg: &BlockConfig,
    seq: SeqLayout,
) -> Result<Var> {
    let h = attention_block(g, x, p, cfg, seq)?;
    ffn_block(g, h, p, cfg)
}
