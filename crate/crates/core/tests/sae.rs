// SPDX-License-Identifier: MIT OR Apache-2.0

use diffsae_core::sae::top_k_relu;
use diffsae_core::{adam_step, Gradients, OptimizerState, SaeModel, SparseLatent};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full-sort reference: rank every index by (value desc, index asc), keep
/// the first `k` positive ones.
fn sorted_reference(pre: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut order: Vec<usize> = (0..pre.len()).collect();
    order.sort_by(|&a, &b| pre[b].partial_cmp(&pre[a]).unwrap().then(a.cmp(&b)));
    let mut out: Vec<(usize, f32)> = order
        .into_iter()
        .take(k)
        .filter(|&i| pre[i] > 0.0)
        .map(|i| (i, pre[i]))
        .collect();
    out.sort_by_key(|p| p.0);
    out
}

fn identity_padded(d: usize, n_f: usize, k: usize) -> SaeModel<f32> {
    let mut enc = vec![0.0f32; n_f * d];
    for i in 0..d.min(n_f) {
        enc[i * d + i] = 1.0;
    }
    SaeModel::from_parts(d, n_f, k, enc.clone(), enc, vec![0.0; d]).unwrap()
}

#[test]
fn tie_goes_to_lower_index() {
    let m = identity_padded(4, 4, 2);
    let z = m.encode(&[3.0, -1.0, 2.0, 2.0]).unwrap();
    assert_eq!(z.to_dense(4), vec![3.0, 0.0, 2.0, 0.0]);
    assert_eq!(z.indices, vec![0, 2]);
}

#[test]
fn all_negative_gives_empty_code() {
    let m = identity_padded(3, 3, 2);
    let z = m.encode(&[-1.0, -0.5, -2.0]).unwrap();
    assert!(z.is_empty());
}

#[test]
fn random_eight_dim_model_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = SaeModel::<f32>::init_random(8, 24, 3, &mut rng).unwrap();
    for _ in 0..200 {
        let x: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pre = m.pre_activations(&x).unwrap();
        let z = m.encode(&x).unwrap();
        let got: Vec<(usize, f32)> = z.iter().collect();
        assert_eq!(got, sorted_reference(&pre, 3));
    }
}

#[test]
fn decode_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = SaeModel::<f32>::init_random(12, 40, 5, &mut rng).unwrap();
    for v in m.bias_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for _ in 0..50 {
        let pairs: Vec<(usize, f32)> = rand::seq::index::sample(&mut rng, 40, 5)
            .into_iter()
            .map(|i| (i, rng.random_range(0.1..3.0)))
            .collect();
        let z = SparseLatent::from_pairs(pairs.clone());
        let got = m.decode(&z).unwrap();
        for c in 0..12 {
            let mut want = f64::from(m.bias()[c]);
            for &(i, v) in &pairs {
                want += f64::from(v) * f64::from(m.concept_vector(i)[c]);
            }
            let rel = (f64::from(got[c]) - want).abs() / want.abs().max(1e-6);
            assert!(rel < 1e-6 || (f64::from(got[c]) - want).abs() < 1e-6, "{rel}");
        }
    }
}

#[test]
fn decode_of_zero_and_basis() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = SaeModel::<f32>::init_random(4, 8, 2, &mut rng).unwrap();
    assert_eq!(m.decode(&SparseLatent::empty()).unwrap(), m.bias());
    let e3 = m.decode(&SparseLatent::from_pairs(vec![(3, 1.0)])).unwrap();
    let want: Vec<f32> = m.concept_vector(3).iter().zip(m.bias()).map(|(f, b)| f + b).collect();
    assert_eq!(e3, want);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut m = SaeModel::from_parts(1, 1, 1, vec![0.5f64], vec![-0.25], vec![2.0]).unwrap();
    let mut opt = OptimizerState::for_model(&m, 0.1);
    let g = Gradients {
        w_enc: vec![1.0],
        w_dec: vec![1.0],
        b: vec![1.0],
    };
    adam_step(&mut m, &mut opt, &g).unwrap();
    assert!((m.encoder()[0] - 0.4).abs() < 1e-6);
    assert!((m.decoder()[0] - -0.35).abs() < 1e-6);
    assert!((m.bias()[0] - 1.9).abs() < 1e-6);
    assert_eq!(opt.step, 1);
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m0 = SaeModel::<f32>::init_random(3, 6, 2, &mut rng).unwrap();
    let mut m = m0.clone();
    let mut opt = OptimizerState::for_model(&m, 0.01);
    let zero = Gradients::zeros_like(&m0);
    adam_step(&mut m, &mut opt, &zero).unwrap();
    assert_eq!(m, m0);
    assert_eq!(opt.step, 1);
    let mut m2 = m0.clone();
    let mut opt2 = OptimizerState::for_model(&m2, 0.01);
    let mut g = Gradients::zeros_like(&m0);
    g.w_dec[3] = 0.7;
    let mut m3 = m0.clone();
    let mut opt3 = OptimizerState::for_model(&m3, 0.01);
    adam_step(&mut m2, &mut opt2, &g).unwrap();
    adam_step(&mut m3, &mut opt3, &g).unwrap();
    assert_eq!(m2, m3);
}

proptest! {
    #[test]
    fn encode_is_sparse_and_matches_sort(
        pre in prop::collection::vec(prop_oneof![-4.0f32..4.0, Just(1.0f32), Just(0.0f32)], 1..40),
        k_frac in 0.0f64..1.0,
    ) {
        let k = 1 + ((pre.len() - 1) as f64 * k_frac) as usize;
        let z = top_k_relu(&pre, k);
        prop_assert!(z.len() <= k);
        prop_assert!(z.values.iter().all(|&v| v > 0.0));
        let got: Vec<(usize, f32)> = z.iter().collect();
        prop_assert_eq!(got, sorted_reference(&pre, k));
    }

    #[test]
    fn decoder_superposition(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = SaeModel::<f32>::init_random(6, 12, 3, &mut rng).unwrap();
        let z1: Vec<f32> = (0..12).map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..2.0) } else { 0.0 }).collect();
        let z2: Vec<f32> = (0..12).map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..2.0) } else { 0.0 }).collect();
        let sum: Vec<f32> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let lhs = m.decode_dense(&sum).unwrap();
        let a = m.decode_dense(&z1).unwrap();
        let b = m.decode_dense(&z2).unwrap();
        for c in 0..6 {
            let l = lhs[c] - m.bias()[c];
            let r = (a[c] - m.bias()[c]) + (b[c] - m.bias()[c]);
            prop_assert!((l - r).abs() <= 1e-5 * (1.0 + l.abs()));
        }
    }
}
