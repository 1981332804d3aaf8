mod common;

use bitskip::data::{Batch, Corpus};
use bitskip::eval::{mean_cross_entropy, perplexity_with_window, variance_profile};
use bitskip::graph::Graph;
use bitskip::layers::Phase;
use bitskip::model::{Decoder, Model, VariantName};
use bitskip::training::cross_entropy;
use common::{layout, random_tokens, small_config, toy_config};
use rand::rngs::mock::StepRng;

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn full_depth_exit_equals_full_forward() {
    for v in VariantName::ALL {
        let model = Model::<f32>::new(small_config(v, 4, 11)).unwrap();
        for seed in 0..3 {
            let tokens = random_tokens(2 * 16, 259, seed);
            let mut g = Graph::inference();
            let trace = model
                .forward_full(&mut g, &tokens, layout(2, 16), Phase::Infer, &mut StepRng::new(0, 0))
                .unwrap();
            let full = g.value(trace.logits_final).clone();
            let exit = model.exit_logits_at(&tokens, layout(2, 16), 4).unwrap();
            assert!(max_abs_diff(full.data(), exit.data()) <= 1e-6, "{v}");
        }
    }
}

#[test]
fn early_exit_matches_truncated_full_trace() {
    let model = Model::<f32>::new(small_config(VariantName::V3, 4, 2)).unwrap();
    let tokens = random_tokens(24, 259, 4);
    let mut g = Graph::inference();
    let trace = model
        .forward_full(&mut g, &tokens, layout(1, 24), Phase::Infer, &mut StepRng::new(0, 0))
        .unwrap();
    assert_eq!(trace.hidden_per_layer.len(), 4);
    assert!(trace.skip_mask.iter().all(|s| !s));
    for k in 1..=4 {
        let via_trace = model
            .exit_logits(&mut g, &trace.vars, trace.hidden_per_layer[k - 1])
            .unwrap();
        let direct = model.exit_logits_at(&tokens, layout(1, 24), k).unwrap();
        assert!(max_abs_diff(g.value(via_trace).data(), direct.data()) <= 1e-6);
    }
}

#[test]
fn outputs_are_causal() {
    for v in [VariantName::V1, VariantName::V2, VariantName::Baseline] {
        let model = Model::<f32>::new(small_config(v, 2, 8)).unwrap();
        let mut a = random_tokens(20, 259, 1);
        let before = model.exit_logits_at(&a, layout(1, 20), 2).unwrap();
        a[15] = (a[15] + 1) % 259;
        let after = model.exit_logits_at(&a, layout(1, 20), 2).unwrap();
        let split = 15 * 259;
        assert_eq!(&before.data()[..split], &after.data()[..split], "{v}");
        assert_ne!(&before.data()[split..], &after.data()[split..]);
    }
}

#[test]
fn cached_decoder_matches_batched_forward() {
    for v in VariantName::ALL {
        let model = Model::<f64>::new(small_config(v, 3, 21)).unwrap();
        let tokens = random_tokens(12, 259, 5);
        for k in [1, 3] {
            let batched = model.exit_logits_at(&tokens, layout(1, 12), k).unwrap();
            let mut dec = Decoder::new(&model, k).unwrap();
            dec.feed(&tokens[..4]).unwrap();
            for t in 4..12 {
                let step = dec.feed(&tokens[t..t + 1]).unwrap();
                let row = &batched.data()[t * 259..(t + 1) * 259];
                let diff = step.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-6, "{v} k={k} t={t} diff={diff}");
            }
        }
    }
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let model = Model::<f32>::new(small_config(VariantName::V1, 2, 3)).unwrap();
    let prompt = random_tokens(10, 256, 9);
    let a = model.generate(&prompt, 80, None).unwrap();
    let b = model.generate(&prompt, 80, None).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.forward_passes, 80);
    assert!(a.window_truncations >= 1);
    assert!(a.tokens.iter().all(|&t| t < 259));
    assert!(model.generate(&prompt, 4, Some(3)).is_err());
}

#[test]
fn untrained_perplexity_is_near_uniform() {
    let corpus = Corpus::from_bytes(&random_tokens(3000, 256, 3).iter().map(|&b| b as u8).collect::<Vec<_>>());
    let model = Model::<f32>::new(small_config(VariantName::V1, 2, 0)).unwrap();
    let ppl = perplexity_with_window(&model, &corpus, None, 64).unwrap();
    assert!((ppl / 259.0 - 1.0).abs() <= 0.10, "ppl {ppl}");
}

#[test]
fn perplexity_is_exp_of_window_cross_entropy() {
    let corpus = Corpus::from_bytes(b"the cat sat on the mat and the dog sat on the log. ".repeat(8).as_slice());
    let model = Model::<f32>::new(small_config(VariantName::V2, 2, 4)).unwrap();
    let (ce, n) = mean_cross_entropy(&model, &corpus, Some(2), 32).unwrap();
    assert_eq!(n, corpus.len() - 1);
    let mut total = 0.0;
    for w in corpus.eval_windows(32).unwrap() {
        let logits = model.exit_logits_at(&w.inputs, w.layout, 2).unwrap();
        let count = w.targets.iter().flatten().count();
        total += cross_entropy(&logits, &w.targets).unwrap() * count as f64;
    }
    let expected = (total / n as f64).exp();
    let got = perplexity_with_window(&model, &corpus, Some(2), 32).unwrap();
    assert!((got / expected - 1.0).abs() <= 1e-6);
    assert!((ce.exp() / expected - 1.0).abs() <= 1e-6);
    let full = perplexity_with_window(&model, &corpus, None, 32).unwrap();
    assert_eq!(full, got);
    assert!(mean_cross_entropy(&model, &Corpus::from_bytes(b""), None, 32).is_err());
}

#[test]
fn variance_profile_shape_and_positivity() {
    let model = Model::<f32>::new(small_config(VariantName::Baseline, 3, 6)).unwrap();
    let probe = Batch {
        inputs: random_tokens(2 * 16, 259, 2),
        targets: vec![None; 32],
        layout: layout(2, 16),
    };
    let prof = variance_profile(&model, &probe).unwrap();
    assert_eq!(prof.stds.len(), 3);
    assert!(prof.stds.iter().all(|&s| s > 0.0));
}

#[test]
fn zero_blocks_leave_embedding_spread() {
    let mut model = Model::<f64>::new(toy_config(VariantName::Baseline, 1)).unwrap();
    for (name, t) in model.tensors_mut() {
        if name.starts_with("blocks.") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let tokens = random_tokens(16, 259, 7);
    let probe = Batch {
        inputs: tokens.clone(),
        targets: vec![None; 16],
        layout: layout(1, 16),
    };
    let prof = variance_profile(&model, &probe).unwrap();
    let emb: Vec<f64> = tokens.iter().flat_map(|&t| model.embed.row(t).to_vec()).collect();
    let expected = bitskip::eval::population_std(&emb);
    for s in prof.stds {
        assert!((s - expected).abs() <= 1e-12);
    }
}
