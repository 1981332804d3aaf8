//! Early-exit objective, AdamW with warmup/decay, clipping and the
//! quantization-aware training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, BatchStream, Corpus};
use crate::error::{Error, Result};
use crate::graph::{row_nll, Graph, Var};
use crate::layers::{Phase, ScheduleMode};
use crate::model::{ForwardTrace, Model, VariantName};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda: f64,
    pub p_max: f64,
    pub schedule_mode: ScheduleMode,
    /// Early-exit training: layer dropout plus the auxiliary exit losses.
    /// When off, training uses `p = 0` and `λ = 0`.
    pub early_exit: bool,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Full recipe for a variant: 4-bit activations get the lower learning
    /// rate, longer warmup and tighter clipping.
    pub fn recipe(variant: VariantName) -> Self {
        let four_bit = variant == VariantName::V2;
        TrainConfig {
            lr_peak: if four_bit { 3e-4 } else { 6e-4 },
            warmup_steps: if four_bit { 4000 } else { 1000 },
            max_steps: 50_000,
            batch_size: 16,
            grad_accum_steps: 4,
            seq_len: 256,
            weight_decay: 0.1,
            clip_norm: if four_bit { 0.5 } else { 1.0 },
            lambda: 0.3,
            p_max: 0.5,
            schedule_mode: ScheduleMode::Raw,
            early_exit: true,
            seed: 0,
            log_every: 10,
            checkpoint_every: 500,
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    /// `λ` actually applied (zero when early-exit training is off).
    pub fn effective_lambda(&self) -> f64 {
        if self.early_exit {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn effective_p_max(&self) -> f64 {
        if self.early_exit {
            self.p_max
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_steps == 0 {
            return bad("train.max_steps must be positive");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.seq_len == 0 {
            return bad("batch_size, grad_accum_steps and seq_len must be positive");
        }
        if !(self.lr_peak > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr_peak and clip_norm must be positive");
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 {
            return bad("weight_decay and lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return bad("p_max must lie in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

/// Components of the combined objective for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub main_loss: f64,
    /// Losses of exits at layers `1..L-1`.
    pub exit_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `main + λ·Σ wᵢ·exitᵢ` recomputed from the parts.
    pub fn recombined(&self) -> f64 {
        self.main_loss
            + self.lambda
                * self
                    .weights
                    .iter()
                    .zip(&self.exit_losses)
                    .map(|(w, e)| w * e)
                    .sum::<f64>()
    }
}

/// Exit weights for layers `i = 1..L-1`: `(i+1)/L`, normalized to sum 1.
pub fn exit_weights(layers: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..layers).map(|i| (i + 1) as f64 / layers as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Builds the total objective on the graph; returns its handle and the
/// per-term breakdown. With `lambda == 0` the exit losses are still
/// evaluated for logging but kept out of the differentiated total.
pub fn early_exit_loss<T: Scalar>(
    g: &mut Graph<T>,
    trace: &ForwardTrace,
    targets: &[Option<usize>],
    model: &Model<T>,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let layers = trace.hidden_per_layer.len();
    if targets.len() != trace.seq.rows() {
        return Err(Error::shape(
            "early_exit_loss",
            format!("{} targets for {} positions", targets.len(), trace.seq.rows()),
        ));
    }
    let main = g.cross_entropy(trace.logits_final, targets)?;
    let weights = exit_weights(layers);
    let mut terms = vec![(main, T::one())];
    let mut exit_losses = Vec::with_capacity(layers.saturating_sub(1));
    for (i, &h) in trace.hidden_per_layer[..layers - 1].iter().enumerate() {
        let logits = model.exit_logits(g, &trace.vars, h)?;
        let ce = g.cross_entropy(logits, targets)?;
        exit_losses.push(g.value(ce).data()[0].to_f64().unwrap());
        if lambda != 0.0 {
            terms.push((ce, T::lit(lambda * weights[i])));
        }
    }
    let total = g.weighted_sum(&terms)?;
    let breakdown = LossBreakdown {
        main_loss: g.value(main).data()[0].to_f64().unwrap(),
        exit_losses,
        weights,
        lambda,
        total: g.value(total).data()[0].to_f64().unwrap(),
    };
    Ok((total, breakdown))
}

/// Mean token cross-entropy (nats), ignoring `None` targets.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Result<f64> {
    let (rows, vocab) = logits.as_matrix();
    if rows != targets.len() {
        return Err(Error::shape("cross_entropy", "row/target count mismatch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= vocab {
                return Err(Error::OutOfRange {
                    what: "target id",
                    value: t,
                    lo: 0,
                    hi: vocab - 1,
                });
            }
            total += row_nll(logits.row(r), t).to_f64().unwrap();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("cross-entropy over zero unmasked targets"));
    }
    Ok(total / count as f64)
}

/// Linear warmup from 0 to `lr_peak`, then linear decay to 0 at `max_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.max_steps);
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.max_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.lr_peak;
    }
    cfg.lr_peak * (cfg.max_steps - step) as f64 / span as f64
}

/// Global-L2-norm gradient clipping; returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(params: &mut [&mut Tensor<T>], clip_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > clip_norm {
        let s = T::from_f64(clip_norm / norm).unwrap();
        for t in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// AdamW moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        AdamW {
            step: 0,
            m: params.iter().map(|t| vec![T::zero(); t.numel()]).collect(),
            v: params.iter().map(|t| vec![T::zero(); t.numel()]).collect(),
        }
    }

    /// One decoupled-weight-decay Adam update. Decay touches matrices only;
    /// 1-D tensors (norm gains) are exempt. Parameters without a gradient
    /// buffer are treated as having zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape("adamw", "parameter list changed length"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr_t = T::lit(lr);
        let eps = T::lit(ADAM_EPS);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.numel() {
                return Err(Error::shape("adamw", "state does not match parameter shape"));
            }
            let decay = if p.shape().len() >= 2 {
                T::one() - lr_t * T::lit(weight_decay)
            } else {
                T::one()
            };
            let grad = p.grad().map(|g| g.to_vec());
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] = data[i] * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
    pub skip_mask: Vec<bool>,
}

/// Per-step RNG: stream 2·step for batches, 2·step+1 for layer skipping.
fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step + purpose);
    rng
}

/// Model plus optimizer state, advanced one optimizer step at a time.
/// Every step draws its data and skip decisions from RNG streams keyed by
/// the step number, so a resumed run continues identically.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub cfg: TrainConfig,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = *model.config();
        if cfg.seq_len > mc.max_seq_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                cfg.seq_len, mc.max_seq_len
            )));
        }
        let mut schedule = mc.schedule;
        schedule.p_max = cfg.effective_p_max();
        schedule.mode = cfg.schedule_mode;
        model = model.with_schedule(schedule)?;
        let optimizer = {
            let params: Vec<&Tensor<T>> = model.tensors().into_iter().map(|(_, t)| t).collect();
            AdamW::new(&params)
        };
        Ok(Trainer {
            model,
            optimizer,
            cfg,
            step: 0,
        })
    }

    /// Restores a trainer from saved parts (see the checkpoint module).
    pub fn resume(model: Model<T>, optimizer: AdamW<T>, cfg: TrainConfig, step: u64) -> Result<Self> {
        let mut t = Trainer::new(model, cfg)?;
        if optimizer.m.len() != t.optimizer.m.len() {
            return Err(Error::Format("optimizer state does not match model".into()));
        }
        t.optimizer = optimizer;
        t.step = step;
        Ok(t)
    }

    /// Micro-batches for optimizer step `step` (1-based).
    pub fn batches_for(&self, corpus: &Corpus, step: u64) -> Result<Vec<Batch>> {
        let mut stream = BatchStream::new(
            corpus,
            self.cfg.batch_size,
            self.cfg.seq_len,
            step_rng(self.cfg.seed, step, 0),
        )?;
        Ok((0..self.cfg.grad_accum_steps).map(|_| stream.next_batch()).collect())
    }

    /// Forward/backward over `batches` (each scaled by `1/len`), then clip
    /// and apply one AdamW update. Every micro-batch sees the same skip mask.
    pub fn step_on(&mut self, batches: &[Batch]) -> Result<StepRecord> {
        let step = self.step + 1;
        let lambda = self.cfg.effective_lambda();
        let n = batches.len();
        let mut sums: Option<LossBreakdown> = None;
        let mut skip_mask = Vec::new();
        self.model.zero_grad();
        for batch in batches {
            let mut g = Graph::new();
            let mut skip_rng = step_rng(self.cfg.seed, step, 1);
            let trace = self.model.forward_full(
                &mut g,
                &batch.inputs,
                batch.layout,
                Phase::Train,
                &mut skip_rng,
            )?;
            let (total, lb) = early_exit_loss(&mut g, &trace, &batch.targets, &self.model, lambda)?;
            let scaled = g.scale(total, T::one() / T::from_usize(n).unwrap());
            g.backward(scaled)?;
            self.model.accumulate_grads(&g, &trace.vars)?;
            skip_mask = trace.skip_mask.clone();
            sums = Some(match sums {
                None => lb,
                Some(mut acc) => {
                    acc.main_loss += lb.main_loss;
                    acc.total += lb.total;
                    for (a, b) in acc.exit_losses.iter_mut().zip(&lb.exit_losses) {
                        *a += b;
                    }
                    acc
                }
            });
        }
        let mut loss = sums.ok_or(Error::Empty("no micro-batches"))?;
        let inv = 1.0 / n as f64;
        loss.main_loss *= inv;
        loss.total *= inv;
        loss.exit_losses.iter_mut().for_each(|e| *e *= inv);

        let lr = lr_at(step, &self.cfg);
        let mut params: Vec<&mut Tensor<T>> =
            self.model.tensors_mut().into_iter().map(|(_, t)| t).collect();
        let grad_norm = clip_gradients(&mut params, self.cfg.clip_norm);
        self.optimizer.step(&mut params, lr, self.cfg.weight_decay)?;
        self.step = step;
        Ok(StepRecord {
            step,
            lr,
            grad_norm,
            loss,
            skip_mask,
        })
    }

    /// Samples this step's data from `corpus` and trains on it.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepRecord> {
        let batches = self.batches_for(corpus, self.step + 1)?;
        self.step_on(&batches)
    }
}

/// Records kept by [`train`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

/// Runs `cfg.max_steps` optimizer steps from scratch. `on_step` sees every
/// step (for checkpointing); records are kept every `cfg.log_every` steps
/// and on the final step.
pub fn train<T: Scalar, F>(
    model: Model<T>,
    corpus: &Corpus,
    cfg: TrainConfig,
    mut on_step: F,
) -> Result<(Model<T>, TrainingLog)>
where
    F: FnMut(&Trainer<T>, &StepRecord) -> Result<()>,
{
    let mut trainer = Trainer::new(model, cfg)?;
    let log = run(&mut trainer, corpus, &mut on_step)?;
    Ok((trainer.model, log))
}

/// Advances `trainer` until `trainer.cfg.max_steps`.
pub fn run<T: Scalar, F>(trainer: &mut Trainer<T>, corpus: &Corpus, on_step: &mut F) -> Result<TrainingLog>
where
    F: FnMut(&Trainer<T>, &StepRecord) -> Result<()>,
{
    let need = trainer.cfg.batch_size * (trainer.cfg.seq_len + 1);
    if corpus.len() < need {
        return Err(Error::CorpusTooSmall(format!(
            "{} tokens, one batch needs {need}",
            corpus.len()
        )));
    }
    let mut log = TrainingLog::default();
    while trainer.step < trainer.cfg.max_steps {
        let rec = trainer.step(corpus)?;
        on_step(trainer, &rec)?;
        if rec.step % trainer.cfg.log_every == 0 || rec.step == trainer.cfg.max_steps {
            log.records.push(rec);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_weight_hand_case() {
        let w = exit_weights(4);
        let expected = [2.0 / 9.0, 3.0 / 9.0, 4.0 / 9.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for l in 2..40 {
            assert!((exit_weights(l).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(exit_weights(1).is_empty());
    }

    #[test]
    fn lr_schedule_points() {
        let cfg = TrainConfig {
            warmup_steps: 100,
            max_steps: 1100,
            ..TrainConfig::recipe(VariantName::V1)
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 6e-4);
        assert!((lr_at(50, &cfg) - 3e-4).abs() < 1e-15);
        assert!((lr_at(600, &cfg) - 6e-4 * 500.0 / 1000.0).abs() < 1e-15);
        assert_eq!(lr_at(1100, &cfg), 0.0);
    }

    #[test]
    fn recipe_defaults() {
        let v1 = TrainConfig::recipe(VariantName::V1);
        assert_eq!((v1.lr_peak, v1.warmup_steps, v1.clip_norm), (6e-4, 1000, 1.0));
        assert_eq!((v1.batch_size, v1.grad_accum_steps, v1.effective_batch()), (16, 4, 64));
        assert_eq!((v1.weight_decay, v1.max_steps, v1.lambda, v1.p_max), (0.1, 50_000, 0.3, 0.5));
        let v2 = TrainConfig::recipe(VariantName::V2);
        assert_eq!((v2.lr_peak, v2.warmup_steps, v2.clip_norm), (3e-4, 4000, 0.5));
    }

    #[test]
    fn clipping_cases() {
        let mut a = Tensor::<f64>::zeros(&[2]);
        a.accumulate_grad(&[0.3, 0.0]).unwrap();
        assert!((clip_gradients(&mut [&mut a], 1.0) - 0.3).abs() < 1e-12);
        assert_eq!(a.grad().unwrap(), &[0.3, 0.0]);

        let mut a = Tensor::<f64>::zeros(&[2]);
        let mut b = Tensor::<f64>::zeros(&[1]);
        a.accumulate_grad(&[1.2, 0.0]).unwrap();
        b.accumulate_grad(&[1.6]).unwrap();
        assert!((clip_gradients(&mut [&mut a, &mut b], 1.0) - 2.0).abs() < 1e-12);
        let post = (a.grad().unwrap()[0].powi(2) + b.grad().unwrap()[0].powi(2)).sqrt();
        assert!((post - 1.0).abs() < 1e-6);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);

        let mut z = Tensor::<f64>::zeros(&[3]);
        z.accumulate_grad(&[0.0; 3]).unwrap();
        assert_eq!(clip_gradients(&mut [&mut z], 1.0), 0.0);
    }

    #[test]
    fn adam_first_step() {
        let mut p = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let mut opt = AdamW::new(&[&p]);
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p], 0.1, 0.0).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[0] - 0.900_000_000_999_999).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_grads() {
        let mut p = Tensor::new(&[1, 2], vec![1.0f64, -2.0]).unwrap();
        let mut gain = Tensor::new(&[2], vec![1.0f64, 1.0]).unwrap();
        let mut opt = AdamW::new(&[&p, &gain]);
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        opt.step(&mut [&mut p, &mut gain], 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        opt.step(&mut [&mut p, &mut gain], 0.1, 0.5).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15 && (p.data()[1] + 1.9).abs() < 1e-15);
        assert_eq!(gain.data(), &[1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::<f64>::zeros(&[2, 4]);
        assert!((cross_entropy(&uniform, &[Some(0), Some(3)]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let confident = Tensor::new(&[1, 3], vec![0.0f64, 60.0, 0.0]).unwrap();
        assert!(cross_entropy(&confident, &[Some(1)]).unwrap() < 1e-20);
        assert!(cross_entropy(&uniform, &[None, None]).is_err());
    }
}
