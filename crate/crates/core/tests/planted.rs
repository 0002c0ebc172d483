// SPDX-License-Identifier: MIT OR Apache-2.0

use diffsae_core::planted::{dictionary_recovery_score, PlantedProblem};
use diffsae_core::SaeModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn residuals(p: &PlantedProblem, n: usize) -> Vec<f64> {
    let s = p.generate(n);
    let mut out = Vec::new();
    for (x, code) in s.vectors.chunks(p.d).zip(&s.codes) {
        let mut sq = 0.0;
        for c in 0..p.d {
            let mut want = f64::from(p.bias[c]);
            for (i, v) in code.iter() {
                want += f64::from(v) * f64::from(p.atom(i)[c]);
            }
            sq += (f64::from(x[c]) - want).powi(2);
        }
        out.push(sq);
    }
    out
}

#[test]
fn residual_rms_matches_noise_level() {
    let p = PlantedProblem::random(16, 64, 4, 0.01, 1).unwrap();
    let r = residuals(&p, 256);
    let rms = (r.iter().sum::<f64>() / r.len() as f64).sqrt();
    let want = 0.01 * 4.0;
    assert!((rms - want).abs() <= 0.2 * want, "rms {rms}");
}

#[test]
fn noiseless_vectors_lie_in_the_sparse_span() {
    let p = PlantedProblem::random(10, 30, 3, 0.0, 2).unwrap();
    assert!(residuals(&p, 100).iter().all(|&r| r < 1e-10));
    let s = p.generate(100);
    for code in &s.codes {
        assert_eq!(code.len(), 3);
        assert!(code.values.iter().all(|&v| (0.5..=2.0).contains(&v)));
    }
}

#[test]
fn single_atom_with_unit_coefficient_reproduces_columns() {
    let p = PlantedProblem::random(6, 8, 1, 0.0, 3).unwrap();
    let p = PlantedProblem::new(6, 8, p.dictionary.clone(), vec![0.0; 6], 1, 0.0, 3)
        .unwrap()
        .with_coeff_range(1.0, 1.0)
        .unwrap();
    let s = p.generate(20);
    for (x, code) in s.vectors.chunks(6).zip(&s.codes) {
        assert_eq!(x, p.atom(code.indices[0]));
    }
}

#[test]
fn true_dictionary_scores_one() {
    let p = PlantedProblem::random(16, 64, 4, 0.0, 4).unwrap();
    let m = SaeModel::from_parts(16, 64, 4, p.dictionary.clone(), p.dictionary.clone(), p.bias.clone()).unwrap();
    assert!((dictionary_recovery_score(&m, &p).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn untrained_models_score_at_random_baseline() {
    let p = PlantedProblem::random(16, 64, 4, 0.01, 5).unwrap();
    let mut scores: Vec<f64> = (0..41)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX);
            let m = SaeModel::<f32>::init_random(16, 64, 4, &mut rng).unwrap();
            dictionary_recovery_score(&m, &p).unwrap()
        })
        .collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = scores[20];
    assert!((0.55..0.65).contains(&median), "{median}");
    assert!(scores[40] < 0.7, "{}", scores[40]);
}
