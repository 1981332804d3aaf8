#![allow(dead_code)]

use std::path::PathBuf;

use bitskip::data::Corpus;
use bitskip::graph::{Graph, SeqLayout};
use bitskip::layers::{DropoutSchedule, Phase, ScheduleMode};
use bitskip::model::{Model, ModelConfig, VariantName};
use bitskip::training::early_exit_loss;
use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// L=2, d=32 model used by the numerical checks.
pub fn toy_config(variant: VariantName, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::desk(variant);
    c.layers = 2;
    c.hidden = 32;
    c.heads = 4;
    c.kv_heads = 1;
    c.ffn_dim = 64;
    c.max_seq_len = 32;
    c.schedule = DropoutSchedule::new(0.5, ScheduleMode::Raw, 2).unwrap();
    c.seed = seed;
    c
}

pub fn small_config(variant: VariantName, layers: usize, seed: u64) -> ModelConfig {
    let mut c = toy_config(variant, seed);
    c.layers = layers;
    c.hidden = 64;
    c.heads = 4;
    c.kv_heads = 2;
    c.ffn_dim = 128;
    c.max_seq_len = 64;
    c.schedule = DropoutSchedule::new(0.5, ScheduleMode::Raw, layers).unwrap();
    c
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn layout(batch: usize, seq: usize) -> SeqLayout {
    SeqLayout { batch, seq }
}

pub fn stories_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/stories.txt")
}

pub fn stories() -> Corpus {
    Corpus::load(&stories_path()).expect("bundled corpus")
}

const BATCH: usize = 2;
const SEQ: usize = 8;

fn fd_probe() -> (Vec<usize>, Vec<Option<usize>>) {
    let ids = random_tokens(BATCH * (SEQ + 1), 259, 17);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for b in 0..BATCH {
        let row = &ids[b * (SEQ + 1)..(b + 1) * (SEQ + 1)];
        inputs.extend_from_slice(&row[..SEQ]);
        targets.extend(row[1..].iter().map(|&t| Some(t)));
    }
    (inputs, targets)
}

pub fn loss_and_grads(model: &mut Model<f64>, inputs: &[usize], targets: &[Option<usize>], grads: bool) -> f64 {
    let mut g = if grads { Graph::new() } else { Graph::inference() };
    let trace = model
        .forward_full(&mut g, inputs, layout(BATCH, SEQ), Phase::Infer, &mut StepRng::new(0, 0))
        .unwrap();
    let (total, _) = early_exit_loss(&mut g, &trace, targets, model, 0.3).unwrap();
    let value = g.value(total).data()[0];
    if grads {
        g.backward(total).unwrap();
        model.zero_grad();
        model.accumulate_grads(&g, &trace.vars).unwrap();
    }
    value
}

/// Analytic gradients of the early-exit objective on a full-precision toy
/// model against central differences; returns (within 1e-3, sampled).
pub fn finite_difference_check(samples_per_tensor: usize) -> (usize, usize) {
    let mut model = Model::<f64>::new(toy_config(VariantName::Baseline, 5)).unwrap();
    // Perturb the unit norm gains so their gradients are not degenerate.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (name, t) in model.tensors_mut() {
        if name.ends_with("norm") {
            t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.2..0.2));
        }
    }
    let (inputs, targets) = fd_probe();
    loss_and_grads(&mut model, &inputs, &targets, true);
    let analytic: Vec<Vec<f64>> = model
        .tensors()
        .iter()
        .map(|(_, t)| t.grad().expect("grad buffer").to_vec())
        .collect();

    let h = 1e-5;
    let mut checked = 0;
    let mut good = 0;
    for (ti, grads) in analytic.iter().enumerate() {
        for _ in 0..samples_per_tensor {
            let j = rng.gen_range(0..grads.len());
            let orig = model.tensors()[ti].1.data()[j];
            let at = |v: f64, m: &mut Model<f64>| {
                m.tensors_mut()[ti].1.data_mut()[j] = v;
                loss_and_grads(m, &inputs, &targets, false)
            };
            let plus = at(orig + h, &mut model);
            let minus = at(orig - h, &mut model);
            at(orig, &mut model);
            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if rel <= 1e-3 {
                good += 1;
            }
        }
    }
    (good, checked)
}
