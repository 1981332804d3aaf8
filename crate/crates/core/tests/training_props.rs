mod common;

use bitskip::checkpoint::{self, load_checkpoint, load_checkpoint_as, save_checkpoint};
use bitskip::data::{Batch, Corpus};
use bitskip::model::{Model, VariantName};
use bitskip::training::{exit_weights, train, TrainConfig, Trainer};
use bitskip::Error;
use common::{layout, random_tokens, stories, toy_config};

fn toy_train_cfg(variant: VariantName, steps: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        warmup_steps: 10,
        batch_size: 4,
        grad_accum_steps: 1,
        seq_len: 32,
        log_every: 1,
        lr_peak: 3e-3,
        seed: 1,
        ..TrainConfig::recipe(variant)
    }
}

fn toy_corpus() -> Corpus {
    let c = stories();
    let bytes = bitskip::tokenizer::detokenize(&c.ids[..100_000]).unwrap();
    Corpus::from_bytes(&bytes)
}

#[test]
fn exit_weights_sum_to_one() {
    for l in 2..64 {
        let w = exit_weights(l);
        assert_eq!(w.len(), l - 1);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn toy_run_beats_uniform_and_keeps_identity() {
    let corpus = toy_corpus();
    let model = Model::<f32>::new(toy_config(VariantName::V1, 0)).unwrap();
    let (_, log) = train(model, &corpus, toy_train_cfg(VariantName::V1, 200), |_, _| Ok(())).unwrap();
    assert_eq!(log.records.len(), 200);
    for r in &log.records {
        let lb = &r.loss;
        assert!((lb.total - lb.recombined()).abs() <= 1e-5, "step {}", r.step);
        assert!((lb.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert_eq!(lb.lambda, 0.3);
    }
    let last = &log.records.last().unwrap().loss;
    assert!(last.total < (259f64).ln(), "total {}", last.total);
}

#[test]
fn disabled_early_exit_reports_but_ignores_exit_losses() {
    let corpus = toy_corpus();
    let cfg = TrainConfig {
        early_exit: false,
        ..toy_train_cfg(VariantName::V1, 5)
    };
    let model = Model::<f32>::new(toy_config(VariantName::V1, 0)).unwrap();
    let (_, log) = train(model, &corpus, cfg, |_, _| Ok(())).unwrap();
    for r in &log.records {
        assert_eq!(r.loss.total, r.loss.main_loss);
        assert_eq!(r.loss.exit_losses.len(), 1);
        assert!(r.loss.exit_losses[0] > 0.0);
        assert!(r.skip_mask.iter().all(|s| !s));
    }
}

#[test]
fn phase_one_baseline_loss_falls_smoothly() {
    let corpus = toy_corpus();
    let cfg = TrainConfig {
        early_exit: false,
        ..toy_train_cfg(VariantName::Baseline, 500)
    };
    let model = Model::<f32>::new(toy_config(VariantName::Baseline, 0)).unwrap();
    let (_, log) = train(model, &corpus, cfg, |_, _| Ok(())).unwrap();
    let losses: Vec<f64> = log.records.iter().map(|r| r.loss.total).collect();
    let smooth: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    let mut best = f64::INFINITY;
    for &s in &smooth {
        assert!(s <= best * 1.05, "uptick to {s} after {best}");
        best = best.min(s);
    }
    assert!(smooth.last().unwrap() < &smooth[0]);
}

#[test]
fn accumulation_matches_one_large_batch() {
    let corpus = toy_corpus();
    let model = Model::<f64>::new(toy_config(VariantName::V1, 2)).unwrap();
    let accum_cfg = TrainConfig {
        batch_size: 2,
        grad_accum_steps: 4,
        ..toy_train_cfg(VariantName::V1, 10)
    };
    let mut a = Trainer::new(model.clone(), accum_cfg).unwrap();
    let micro = a.batches_for(&corpus, 1).unwrap();
    let big = Batch::stack(&micro);
    let mut b = Trainer::new(
        model,
        TrainConfig {
            batch_size: 8,
            grad_accum_steps: 1,
            ..accum_cfg
        },
    )
    .unwrap();
    let ra = a.step_on(&micro).unwrap();
    let rb = b.step_on(&[big]).unwrap();
    assert_eq!(ra.skip_mask, rb.skip_mask);
    assert!((ra.loss.total - rb.loss.total).abs() <= 1e-9);
    for ((_, pa), (_, pb)) in a.model.tensors().iter().zip(b.model.tensors()) {
        for (x, y) in pa.grad().unwrap().iter().zip(pb.grad().unwrap()) {
            assert!((x - y).abs() <= 1e-9);
        }
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
}

#[test]
fn resumed_run_continues_identically() {
    let corpus = toy_corpus();
    let cfg = TrainConfig {
        grad_accum_steps: 2,
        ..toy_train_cfg(VariantName::V3, 6)
    };
    let fresh = || Model::<f32>::new(toy_config(VariantName::V3, 4)).unwrap();
    let (straight, full_log) = train(fresh(), &corpus, cfg, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(fresh(), cfg).unwrap();
    for _ in 0..3 {
        first.step(&corpus).unwrap();
    }
    let bytes = checkpoint::encode(&first.model, Some(&first.optimizer), first.step);
    let ck = checkpoint::decode::<f32>(&bytes).unwrap();
    let mut resumed = Trainer::resume(ck.model, ck.optimizer.unwrap(), cfg, ck.step).unwrap();
    let mut tail = Vec::new();
    while resumed.step < cfg.max_steps {
        tail.push(resumed.step(&corpus).unwrap());
    }
    assert_eq!(tail, full_log.records[3..].to_vec());
    assert_eq!(resumed.model.tensors(), straight.tensors());
}

#[test]
fn checkpoint_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::new(toy_config(VariantName::V2, 8)).unwrap();
    save_checkpoint(&path, &model, None, 12).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.step, 12);
    assert!(loaded.optimizer.is_none());
    let probe = random_tokens(2 * 16, 259, 3);
    let a = model.exit_logits_at(&probe, layout(2, 16), 2).unwrap();
    let b = loaded.model.exit_logits_at(&probe, layout(2, 16), 2).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    assert!(matches!(
        load_checkpoint_as::<f32>(&path, VariantName::V1),
        Err(Error::VariantMismatch { .. })
    ));
    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.ckpt");
    let mut magic = bytes.clone();
    magic[1] = b'X';
    std::fs::write(&bad, &magic).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::Format(_))));
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::Format(_))));
    assert!(matches!(
        load_checkpoint::<f32>(&dir.path().join("missing.ckpt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn checkpoint_rejects_shape_disagreement() {
    let model = Model::<f32>::new(toy_config(VariantName::V1, 8)).unwrap();
    let mut bytes = checkpoint::encode(&model, None, 0);
    // First tensor is the embedding: name "embed", rank 2, then dims.
    let needle = b"embed";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len();
    let dim0 = at + 4;
    bytes[dim0..dim0 + 8].copy_from_slice(&258u64.to_le_bytes());
    assert!(matches!(checkpoint::decode::<f32>(&bytes), Err(Error::Shape { .. })));
}
