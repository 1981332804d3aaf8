//! Decoder-only transformer assembled from the variant's linear layers, with
//! a shared (final-norm + LM head) exit head usable at any depth.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::kernels;
use crate::layers::{
    layer_skip_apply, transformer_block, BlockConfig, BlockParams, BlockVars, DropoutSchedule,
    Phase, ScheduleMode, WeightMode, BLOCK_PARAM_NAMES, NORM_EPS,
};
use crate::quant::{self, ActivationBits};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantName {
    V1,
    V2,
    V3,
    Baseline,
}

impl VariantName {
    pub const ALL: [VariantName; 4] = [
        VariantName::V1,
        VariantName::V2,
        VariantName::V3,
        VariantName::Baseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::V1 => "v1",
            VariantName::V2 => "v2",
            VariantName::V3 => "v3",
            VariantName::Baseline => "baseline",
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(VariantName::V1),
            "v2" => Ok(VariantName::V2),
            "v3" => Ok(VariantName::V3),
            "baseline" | "layerskip" => Ok(VariantName::Baseline),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (valid: v1, v2, v3, baseline)"
            ))),
        }
    }
}

/// Quantization features of one architecture variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VariantConfig {
    pub name: VariantName,
    pub weight_mode: WeightMode,
    pub activation_bits: Option<ActivationBits>,
    pub hadamard: bool,
}

impl VariantConfig {
    pub fn of(name: VariantName) -> Self {
        use ActivationBits::*;
        let (weight_mode, activation_bits, hadamard) = match name {
            VariantName::V1 => (WeightMode::Ternary, Some(Eight), false),
            VariantName::V2 => (WeightMode::Ternary, Some(Four), true),
            VariantName::V3 => (WeightMode::Ternary, Some(Eight), true),
            VariantName::Baseline => (WeightMode::FullPrecision, None, false),
        };
        VariantConfig {
            name,
            weight_mode,
            activation_bits,
            hadamard,
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.weight_mode == WeightMode::Ternary || self.activation_bits.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub schedule: DropoutSchedule,
    pub variant: VariantConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale shape: 8 layers, width 256, 8 heads sharing 2 KV
    /// heads (4:1), FFN 512, byte vocabulary, context 256.
    pub fn desk(variant: VariantName) -> Self {
        ModelConfig {
            layers: 8,
            hidden: 256,
            heads: 8,
            kv_heads: 2,
            ffn_dim: 512,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 256,
            schedule: DropoutSchedule {
                p_max: 0.5,
                mode: ScheduleMode::Raw,
                layers: 8,
            },
            variant: VariantConfig::of(variant),
            seed: 0,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            hidden: self.hidden,
            heads: self.heads,
            kv_heads: self.kv_heads,
            ffn_dim: self.ffn_dim,
            weight_mode: self.variant.weight_mode,
            activation_bits: self.variant.activation_bits,
            hadamard: self.variant.hadamard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "layers, vocab_size and max_seq_len must be positive".into(),
            ));
        }
        if self.schedule.layers != self.layers {
            return Err(Error::Config(format!(
                "dropout schedule covers {} layers, model has {}",
                self.schedule.layers, self.layers
            )));
        }
        DropoutSchedule::new(self.schedule.p_max, self.schedule.mode, self.layers)?;
        self.block().validate()
    }

    /// Exit layers `{L/4, L/2, 3L/4, L}` (deduplicated, each at least 1).
    pub fn exit_layers(&self) -> Vec<usize> {
        let l = self.layers;
        let mut v: Vec<usize> = [l / 4, l / 2, 3 * l / 4, l]
            .into_iter()
            .map(|k| k.max(1))
            .collect();
        v.dedup();
        v
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let per_block: usize = 2 * self.hidden
            + self
                .block()
                .projection_shapes()
                .iter()
                .map(|[o, i]| o * i)
                .sum::<usize>();
        2 * self.vocab_size * self.hidden + self.hidden + self.layers * per_block
    }
}

/// Trainable parameters. Embedding and LM head are separate matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

/// Graph handles for the parameters registered by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub head: Var,
}

/// Everything a forward pass exposes: final logits, each `h_l`, and which
/// layers were skipped.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits_final: Var,
    pub hidden_per_layer: Vec<Var>,
    pub skip_mask: Vec<bool>,
    pub vars: ModelVars,
    pub seq: SeqLayout,
}

fn init_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
    let data = (0..rows * cols)
        .map(|_| T::of_f32(normal.sample(rng)))
        .collect();
    Tensor::new(&[rows, cols], data)
        .expect("valid shape")
        .with_requires_grad(true)
}

impl<T: Scalar> Model<T> {
    /// Builds a model with `N(0, 0.02)` weights and unit norm gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden;
        let gain = || Tensor::ones(&[d]).with_requires_grad(true);
        let embed = init_matrix(&mut rng, config.vocab_size, d);
        let block_cfg = config.block();
        let blocks = (0..config.layers)
            .map(|_| {
                let [wq, wk, wv, wo, w_gate, w_up, w_down] = block_cfg
                    .projection_shapes()
                    .map(|[o, i]| init_matrix(&mut rng, o, i));
                BlockParams {
                    attn_norm: gain(),
                    wq,
                    wk,
                    wv,
                    wo,
                    ffn_norm: gain(),
                    w_gate,
                    w_up,
                    w_down,
                }
            })
            .collect();
        let head = init_matrix(&mut rng, config.vocab_size, d);
        Ok(Model {
            config,
            embed,
            blocks,
            final_norm: gain(),
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the layer-dropout schedule, keeping all parameters.
    pub fn with_schedule(mut self, schedule: DropoutSchedule) -> Result<Self> {
        let mut cfg = self.config;
        cfg.schedule = schedule;
        cfg.validate()?;
        self.config = cfg;
        Ok(self)
    }

    /// Named parameters in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_PARAM_NAMES.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_PARAM_NAMES.iter().zip(b.tensors_mut()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            embed: self.embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let [attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down] =
                        b.tensors().map(|t| t.cast());
                    BlockParams {
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
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }

    fn register(&self, g: &mut Graph<T>, depth: usize) -> ModelVars {
        ModelVars {
            embed: g.param(&self.embed),
            blocks: self.blocks[..depth].iter().map(|b| b.register(g)).collect(),
            final_norm: g.param(&self.final_norm),
            head: g.param(&self.head),
        }
    }

    /// Shared exit head: final RMSNorm then the LM head projection.
    pub fn exit_logits(&self, g: &mut Graph<T>, vars: &ModelVars, h: Var) -> Result<Var> {
        let n = g.rmsnorm(h, vars.final_norm, T::lit(NORM_EPS))?;
        g.linear(n, vars.head)
    }

    fn check_tokens(&self, tokens: &[usize], seq: SeqLayout) -> Result<()> {
        if seq.batch == 0 || seq.seq == 0 || tokens.len() != seq.rows() {
            return Err(Error::shape(
                "forward",
                format!("{} tokens for batch {}×{}", tokens.len(), seq.batch, seq.seq),
            ));
        }
        if seq.seq > self.config.max_seq_len {
            return Err(Error::OutOfRange {
                what: "sequence length",
                value: seq.seq,
                lo: 1,
                hi: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Runs all `L` blocks. In [`Phase::Train`] each layer is skipped with its
    /// scheduled probability (one draw per layer from `rng`).
    pub fn forward_full<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        seq: SeqLayout,
        phase: Phase,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens, seq)?;
        let vars = self.register(g, self.config.layers);
        let block_cfg = self.config.block();
        let mut h = g.embedding(vars.embed, tokens)?;
        let mut hidden = Vec::with_capacity(self.config.layers);
        let mut skip_mask = Vec::with_capacity(self.config.layers);
        for (l, bv) in vars.blocks.iter().enumerate() {
            let p = self.config.schedule.p(l + 1)?;
            let (next, skipped) = layer_skip_apply(
                h,
                |h| transformer_block(g, h, bv, &block_cfg, seq),
                p,
                phase,
                rng,
            )?;
            h = next;
            hidden.push(h);
            skip_mask.push(skipped);
        }
        let logits_final = self.exit_logits(g, &vars, h)?;
        Ok(ForwardTrace {
            logits_final,
            hidden_per_layer: hidden,
            skip_mask,
            vars,
            seq,
        })
    }

    /// Inference-phase full forward on a fresh gradient-free graph.
    pub fn infer_logits(&self, tokens: &[usize], seq: SeqLayout) -> Result<Tensor<T>> {
        self.exit_logits_at(tokens, seq, self.config.layers)
    }

    /// Runs blocks `1..=k` only, then the shared exit head on `h_k`.
    pub fn forward_exit_at(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        seq: SeqLayout,
        k: usize,
    ) -> Result<Var> {
        self.check_tokens(tokens, seq)?;
        if k == 0 || k > self.config.layers {
            return Err(Error::OutOfRange {
                what: "exit layer",
                value: k,
                lo: 1,
                hi: self.config.layers,
            });
        }
        let vars = self.register(g, k);
        let block_cfg = self.config.block();
        let mut h = g.embedding(vars.embed, tokens)?;
        for bv in &vars.blocks {
            h = transformer_block(g, h, bv, &block_cfg, seq)?;
        }
        self.exit_logits(g, &vars, h)
    }

    /// [`Self::forward_exit_at`] on a throwaway inference graph.
    pub fn exit_logits_at(&self, tokens: &[usize], seq: SeqLayout, k: usize) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let v = self.forward_exit_at(&mut g, tokens, seq, k)?;
        Ok(g.value(v).clone())
    }

    /// Adds the graph's parameter gradients into each tensor's grad buffer.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &ModelVars) -> Result<()> {
        let mut handles = vec![vars.embed];
        for bv in &vars.blocks {
            handles.extend(bv.vars());
        }
        handles.push(vars.final_norm);
        handles.push(vars.head);
        let registered_blocks = vars.blocks.len();
        let per_block = BLOCK_PARAM_NAMES.len();
        let layers = self.config.layers;
        let mut tensors = self.tensors_mut();
        // Skip the tensors of blocks that were never registered.
        let tail = tensors.split_off(1 + layers * per_block);
        tensors.truncate(1 + registered_blocks * per_block);
        tensors.extend(tail);
        for ((_, t), v) in tensors.into_iter().zip(handles) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Greedy decoding with a per-layer key/value cache.
    ///
    /// The prompt minus its last token is ingested first (untimed); each of
    /// the `n_tokens` generated ids then costs exactly one single-token
    /// forward pass through `exit_layer` blocks (all blocks when `None`).
    pub fn generate(
        &self,
        prompt: &[usize],
        n_tokens: usize,
        exit_layer: Option<usize>,
    ) -> Result<Generation> {
        if n_tokens == 0 {
            return Err(Error::Config("n_tokens must be at least 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Config("generation needs a non-empty prompt".into()));
        }
        let depth = exit_layer.unwrap_or(self.config.layers);
        let mut dec = Decoder::new(self, depth)?;
        let window = self.config.max_seq_len;
        let mut history: Vec<usize> = prompt.to_vec();
        let mut truncations = 0;
        let ingest_start = if prompt.len() > window {
            truncations += 1;
            prompt.len() - window
        } else {
            0
        };
        dec.feed(&prompt[ingest_start..prompt.len() - 1])?;

        let mut out = Vec::with_capacity(n_tokens);
        let mut passes = 0;
        let start = Instant::now();
        let mut last = *prompt.last().expect("non-empty");
        for _ in 0..n_tokens {
            if dec.position() + 1 > window {
                // Slide: keep the most recent window-1 tokens as context.
                truncations += 1;
                dec.reset();
                let keep = &history[history.len() - window..history.len() - 1];
                dec.feed(keep)?;
            }
            let logits = dec.feed(&[last])?;
            passes += 1;
            last = argmax(&logits);
            out.push(last);
            history.push(last);
        }
        Ok(Generation {
            tokens: out,
            elapsed: start.elapsed(),
            forward_passes: passes,
            window_truncations: truncations,
        })
    }
}

/// Result of [`Model::generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Wall-clock time of the generation loop, excluding prompt ingestion.
    pub elapsed: Duration,
    pub forward_passes: usize,
    pub window_truncations: usize,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Projection weights as used at inference: ternarized once up front.
struct FrozenBlock<T> {
    attn_norm: Vec<T>,
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
    ffn_norm: Vec<T>,
    w_gate: Vec<T>,
    w_up: Vec<T>,
    w_down: Vec<T>,
}

/// Incremental decoder over the first `depth` blocks of a model.
pub struct Decoder<'m, T> {
    model: &'m Model<T>,
    blocks: Vec<FrozenBlock<T>>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    position: usize,
}

impl<'m, T: Scalar> Decoder<'m, T> {
    pub fn new(model: &'m Model<T>, depth: usize) -> Result<Self> {
        let cfg = model.config();
        if depth == 0 || depth > cfg.layers {
            return Err(Error::OutOfRange {
                what: "exit layer",
                value: depth,
                lo: 1,
                hi: cfg.layers,
            });
        }
        let ternary = cfg.variant.weight_mode == WeightMode::Ternary;
        let freeze = |t: &Tensor<T>| {
            let mut out = t.data().to_vec();
            if ternary {
                quant::ternary_dequant_into(t.data(), &mut out);
            }
            out
        };
        let blocks = model.blocks[..depth]
            .iter()
            .map(|b| FrozenBlock {
                attn_norm: b.attn_norm.data().to_vec(),
                wq: freeze(&b.wq),
                wk: freeze(&b.wk),
                wv: freeze(&b.wv),
                wo: freeze(&b.wo),
                ffn_norm: b.ffn_norm.data().to_vec(),
                w_gate: freeze(&b.w_gate),
                w_up: freeze(&b.w_up),
                w_down: freeze(&b.w_down),
            })
            .collect();
        Ok(Decoder {
            model,
            blocks,
            keys: vec![Vec::new(); depth],
            values: vec![Vec::new(); depth],
            position: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn reset(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
        self.position = 0;
    }

    fn project(&self, x: &[T], rows: usize, w: &[T], inp: usize, out: usize) -> Vec<T> {
        let v = self.model.config().variant;
        let mut x = x.to_vec();
        if v.hadamard {
            crate::hadamard::HadamardPlan::new(inp)
                .and_then(|p| p.apply_rows(&mut x))
                .expect("validated width");
        }
        if let Some(bits) = v.activation_bits {
            let src = x.clone();
            quant::quantize_rows_into(&src, inp, bits, &mut x);
        }
        kernels::linear(&x, w, rows, inp, out)
    }

    /// Appends `tokens` to the context; returns next-token logits for the
    /// last of them (empty when `tokens` is empty).
    pub fn feed(&mut self, tokens: &[usize]) -> Result<Vec<T>> {
        let cfg = *self.model.config();
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        if self.position + tokens.len() > cfg.max_seq_len {
            return Err(Error::OutOfRange {
                what: "context length",
                value: self.position + tokens.len(),
                lo: 1,
                hi: cfg.max_seq_len,
            });
        }
        let bc = cfg.block();
        let (d, kvw, f) = (cfg.hidden, bc.kv_width(), cfg.ffn_dim);
        let layout = bc.head_layout();
        let c = tokens.len();
        let eps = T::lit(NORM_EPS);
        let positions: Vec<usize> = (self.position..self.position + c).collect();

        let mut x = Vec::with_capacity(c * d);
        for &t in tokens {
            if t >= cfg.vocab_size {
                return Err(Error::OutOfRange {
                    what: "token id",
                    value: t,
                    lo: 0,
                    hi: cfg.vocab_size - 1,
                });
            }
            x.extend_from_slice(self.model.embed.row(t));
        }
        let mut norm = vec![T::zero(); c * d];
        let mut inv = vec![T::zero(); c];
        for l in 0..self.blocks.len() {
            let b = &self.blocks[l];
            kernels::rmsnorm_rows(&x, &b.attn_norm, eps, &mut norm, &mut inv);
            let mut q = self.project(&norm, c, &b.wq, d, d);
            let mut k = self.project(&norm, c, &b.wk, d, kvw);
            let v = self.project(&norm, c, &b.wv, d, kvw);
            kernels::rope_rows(&mut q, d, bc.head_dim(), &positions, T::one());
            kernels::rope_rows(&mut k, kvw, bc.head_dim(), &positions, T::one());
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let nk = self.position + c;
            let mut att = vec![T::zero(); c * d];
            kernels::causal_attention(
                &q,
                &self.keys[l],
                &self.values[l],
                c,
                nk,
                self.position,
                layout,
                &mut att,
                None,
            );
            let b = &self.blocks[l];
            let o = self.project(&att, c, &b.wo, d, d);
            x.iter_mut().zip(&o).for_each(|(a, &o)| *a += o);

            kernels::rmsnorm_rows(&x, &b.ffn_norm, eps, &mut norm, &mut inv);
            let gate = self.project(&norm, c, &b.w_gate, d, f);
            let up = self.project(&norm, c, &b.w_up, d, f);
            let hmid: Vec<T> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| kernels::silu(g) * u)
                .collect();
            let down = self.project(&hmid, c, &b.w_down, f, d);
            x.iter_mut().zip(&down).for_each(|(a, &o)| *a += o);
        }
        self.position += c;

        let last = &x[(c - 1) * d..];
        let mut n = vec![T::zero(); d];
        let mut inv1 = [T::zero()];
        kernels::rmsnorm_rows(last, self.model.final_norm.data(), eps, &mut n, &mut inv1);
        Ok(kernels::linear(&n, self.model.head.data(), 1, d, cfg.vocab_size))
    }
}
