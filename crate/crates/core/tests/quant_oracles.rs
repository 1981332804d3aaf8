use bitskip::quant::{quantize_activations, ste_gradient, ternary_quantize, ActivationBits};
use bitskip::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent reimplementation: α in f32 summed left to right, then
/// threshold at α/2.
fn brute_ternary(w: &[f32]) -> (Vec<i8>, f32) {
    let mut s = 0.0f32;
    for v in w {
        s += v.abs();
    }
    let alpha = s / w.len() as f32;
    let t = 0.5 * alpha;
    let codes = w
        .iter()
        .map(|&v| if v > t { 1 } else if v < -t { -1 } else { 0 })
        .collect();
    (codes, alpha)
}

#[test]
fn ternary_matches_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let rows = rng.gen_range(1..24);
        let cols = rng.gen_range(1..24);
        let scale = 10f32.powf(rng.gen_range(-3.0..1.0));
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let w = Tensor::new(&[rows, cols], data.clone()).unwrap();
        let q = ternary_quantize(&w);
        let (codes, alpha) = brute_ternary(&data);
        assert_eq!(q.codes(), codes.as_slice());
        assert_eq!(q.alpha().to_bits(), alpha.to_bits());
        let dq = q.dequantize();
        for (d, c) in dq.data().iter().zip(&codes) {
            assert_eq!(*d, *c as f32 * alpha);
        }
    }
}

fn rows_strategy() -> impl Strategy<Value = (usize, Vec<f32>)> {
    (1usize..6, 1usize..40).prop_flat_map(|(r, d)| {
        (Just(d), proptest::collection::vec(-50.0f32..50.0, r * d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn activation_error_bounds_and_grid((d, data) in rows_strategy(), four in any::<bool>()) {
        let bits = if four { 4 } else { 8 };
        let (qmax, qmin) = if four { (7.0f32, -8.0f32) } else { (127.0, -128.0) };
        let x = Tensor::new(&[data.len() / d, d], data.clone()).unwrap();
        let q = quantize_activations(&x, bits).unwrap();
        for r in 0..data.len() / d {
            let row = &data[r * d..(r + 1) * d];
            let s = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            prop_assert_eq!(q.scale_per_token[r], s);
            for (i, &v) in row.iter().enumerate() {
                let out = q.values.data()[r * d + i];
                prop_assert!((out - v).abs() <= s / qmax * 0.5 + 1e-6 + 1e-6 * s);
                if s > 0.0 {
                    let code = out * qmax / s;
                    prop_assert!((code - code.round()).abs() <= 1e-3);
                    prop_assert!(code.round() >= qmin && code.round() <= qmax);
                }
            }
        }
    }

    #[test]
    fn activation_quantization_is_idempotent((d, data) in rows_strategy(), four in any::<bool>()) {
        let bits = if four { 4 } else { 8 };
        let x = Tensor::new(&[data.len() / d, d], data).unwrap();
        let once = quantize_activations(&x, bits).unwrap().values;
        let twice = quantize_activations(&once, bits).unwrap().values;
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn ste_is_identity(g in proptest::collection::vec(-1e3f32..1e3, 0..64)) {
        prop_assert_eq!(ste_gradient(&g), g);
    }
}

#[test]
fn zero_rows_and_bad_widths() {
    let x = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1e-9, -1e-9, 0.0]).unwrap();
    let q = quantize_activations(&x, 8).unwrap();
    assert!(q.values.data().iter().all(|&v| v == 0.0));
    assert!(quantize_activations(&x, 3).is_err());
    assert!(ActivationBits::from_bits(16).is_err());
}
