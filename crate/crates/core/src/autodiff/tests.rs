use proptest::prelude::*;

use super::*;
use crate::error::Error;

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2]));
    let y = t.softmax_lastdim(x);
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul() {
    let mut t = Tape::new();
    let a = Tensor::from_fn(&[3, 3], |i| (i as f64 * 1.3).sin());
    let i3 = t.constant(Tensor::eye(3));
    let av = t.constant(a.clone());
    let y = t.matmul(i3, av).unwrap();
    assert_eq!(t.value(y).data(), a.data());
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let g = t.constant(Tensor::ones(&[3]));
    let b = t.constant(Tensor::zeros(&[3]));
    let y = t.layer_norm_lastdim(x, g, b).unwrap();
    // μ = 2, σ² = 2/3
    let sigma = (2.0f64 / 3.0).sqrt();
    let expected = [-1.0 / sigma, 0.0, 1.0 / sigma];
    for (got, want) in t.value(y).data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-9);
    }
    let vals = t.value(y).data();
    let mean: f64 = vals.iter().sum::<f64>() / 3.0;
    let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
}

#[test]
fn shape_errors_name_kernel_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 2]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    let err = t.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    let table = t.constant(Tensor::zeros(&[5, 2]));
    match t.embedding_lookup(table, &[1, 5]) {
        Err(Error::EmbeddingIndex { index: 5, vocab: 5 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn cross_entropy_uniform_is_log_vocab() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::zeros(&[1, 4]));
    let loss = t.cross_entropy_masked(logits, &[2], &[true]).unwrap();
    assert!((t.value(loss).item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_dominant_class_goes_to_zero() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::new(&[1, 3], vec![0.0, 1e6, 0.0]).unwrap());
    let loss = t.cross_entropy_masked(logits, &[1], &[true]).unwrap();
    assert!(t.value(loss).item().abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    // Independent recomputation straight from the definition.
    let raw: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.37).collect();
    let targets = [4, 0, 2];
    let mask = [true, false, true];
    let mut oracle = 0.0;
    let mut n = 0.0;
    for r in 0..3 {
        if !mask[r] {
            continue;
        }
        let row = &raw[r * 5..(r + 1) * 5];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        oracle += -(row[targets[r]].exp() / z).ln();
        n += 1.0;
    }
    oracle /= n;
    let mut t = Tape::new();
    let logits = t.leaf(Tensor::new(&[3, 5], raw).unwrap().with_grad());
    let loss = t.cross_entropy_masked(logits, &targets, &mask).unwrap();
    assert!((t.value(loss).item() - oracle).abs() < 1e-12);
    let g = t.backward(loss).unwrap();
    let gl = g.get(logits).unwrap().data();
    assert!(gl[5..10].iter().all(|&x| x == 0.0), "unmasked row must get zero gradient");
}

#[test]
fn cross_entropy_rejects_empty_mask() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.cross_entropy_masked(logits, &[0, 1], &[false, false]).unwrap_err();
    assert_eq!(err.to_string(), "empty loss mask");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64).with_grad());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 12]);
    assert_eq!(g.get(x).unwrap().shape(), &[2, 3, 2]);
}

#[test]
fn backward_of_dot_swaps_operands() {
    let mut t = Tape::new();
    let xv = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let yv = Tensor::new(&[3], vec![4.0, 0.25, -3.0]).unwrap();
    let x = t.leaf(xv.clone().with_grad());
    let y = t.leaf(yv.clone().with_grad());
    let p = t.mul(x, y).unwrap();
    let d = t.sum(p);
    let g = t.backward(d).unwrap();
    assert_eq!(g.get(x).unwrap().data(), yv.data());
    assert_eq!(g.get(y).unwrap().data(), xv.data());
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[2], vec![3.0, -1.0]).unwrap().with_grad());
    let a = t.add(x, x).unwrap();
    let b = t.scale(x, 3.0);
    let c = t.add(a, b).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[5.0, 5.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2]).with_grad());
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y), Err(Error::NonScalarRoot(_))));
}

#[test]
fn constants_are_not_recorded_for_gradients() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::ones(&[2]));
    let b = t.scale(a, 2.0);
    let x = t.leaf(Tensor::ones(&[2]).with_grad());
    let c = t.mul(b, x).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::ones(&[2]).with_grad());
    let unused = t.leaf(Tensor::ones(&[3]).with_grad());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let cases = gradcheck::kernel_cases(11);
        let mut bits = Vec::new();
        for case in &cases {
            let mut t = Tape::new();
            let b = case.params.bind(&mut t);
            let root = (case.program)(&mut t, &b).unwrap();
            for (_, g) in t.backward(root).unwrap().iter() {
                bits.extend(g.data().iter().map(|x| x.to_bits()));
            }
        }
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn attention_skips_invalid_keys() {
    use std::sync::Arc;
    let mut t = Tape::new();
    let q = t.constant(Tensor::from_fn(&[2, 4], |i| i as f64 * 0.1));
    let k = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).cos()));
    let v = t.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
    let layout = Arc::new(AttentionLayout {
        batch: 1,
        q_len: 2,
        k_len: 3,
        heads: 1,
        causal: false,
        key_valid: vec![true, false, false],
    });
    let y = t.attention(q, k, v, layout).unwrap();
    // Only key 0 is visible, so every query returns value row 0.
    assert_eq!(t.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-30.0..30.0));
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.softmax_lastdim(v);
        for row in t.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(
        cols in 2usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[3, cols], |_| rng.random_range(-5.0..5.0));
        // eps = 1e-12 inside the square root; keep σ² well above it.
        for row in x.data().chunks(cols) {
            let m = row.iter().sum::<f64>() / cols as f64;
            prop_assume!(row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64 > 1e-2);
        }
        let mut t = Tape::new();
        let xv = t.constant(x);
        let g = t.constant(Tensor::ones(&[cols]));
        let b = t.constant(Tensor::zeros(&[cols]));
        let y = t.layer_norm_lastdim(xv, g, b).unwrap();
        for row in t.value(y).data().chunks(cols) {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
