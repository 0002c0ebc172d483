// SPDX-License-Identifier: MIT OR Apache-2.0

use diffsae_core::analysis::{
    concept_intensity, edit_success_table, quadrant_success, rank_top_examples, ConceptIntensity, EditRecord,
    SpatialVariance, RANDOM_QUADRANT_BASELINE,
};
use diffsae_core::{LatentGrid, Quadrant, SparseLatent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn worked_center_of_mass_examples() {
    let mut corner = vec![0.0; 64];
    corner[0] = 1.0;
    let o = quadrant_success(&corner, 8, 8, Quadrant::TopLeft).unwrap();
    assert!(o.success);
    assert_eq!(o.center, (0.0, 0.0));
    assert!(!quadrant_success(&corner, 8, 8, Quadrant::TopRight).unwrap().success);

    let uniform = vec![1.0; 64];
    let o = quadrant_success(&uniform, 8, 8, Quadrant::BottomRight).unwrap();
    assert_eq!(o.center, (3.5, 3.5));
    assert_eq!(o.classified, Quadrant::BottomRight);
    assert!(o.success);

    let mut two = vec![0.0; 64];
    two[8 + 1] = 3.0;
    two[7 * 8 + 7] = 1.0;
    let o = quadrant_success(&two, 8, 8, Quadrant::TopLeft).unwrap();
    assert_eq!(o.center, (2.5, 2.5));
    assert_eq!(o.classified, Quadrant::TopLeft);
    assert!(o.success);

    assert!(quadrant_success(&vec![0.0; 64], 8, 8, Quadrant::TopLeft).is_err());
    assert_eq!(RANDOM_QUADRANT_BASELINE, 0.25);
}

#[test]
fn classification_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let map: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = quadrant_success(&map, h, w, Quadrant::TopLeft).unwrap().classified;
        for s in [0.5, 4.0, 1024.0] {
            let scaled: Vec<f64> = map.iter().map(|v| v * s).collect();
            assert_eq!(quadrant_success(&scaled, h, w, Quadrant::TopLeft).unwrap().classified, base);
        }
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, n_f: usize) -> LatentGrid<f32> {
    let cells = (0..h * w)
        .map(|_| {
            let mut pairs = Vec::new();
            for c in 0..n_f {
                if rng.random_bool(0.4) {
                    pairs.push((c, rng.random_range(0.0..3.0f32)));
                }
            }
            SparseLatent::from_pairs(pairs)
        })
        .collect();
    LatentGrid::from_cells(h, w, n_f, cells).unwrap()
}

fn scaled(g: &LatentGrid<f32>, s: f32) -> LatentGrid<f32> {
    let cells = g
        .cells()
        .iter()
        .map(|c| SparseLatent::from_pairs(c.iter().map(|(i, v)| (i, v * s)).collect()))
        .collect();
    LatentGrid::from_cells(g.h(), g.w(), g.n_f(), cells).unwrap()
}

#[test]
fn intensity_is_linear_in_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_grid(&mut rng, 4, 5, 6);
    for cid in 0..6 {
        let base = concept_intensity(&g, cid);
        let by_loop: f64 = (0..20).map(|p| f64::from(g.cells()[p].to_dense(6)[cid])).sum::<f64>() / 20.0;
        assert!((base - by_loop).abs() < 1e-12);
        for s in [0.0f32, 0.5, 3.0] {
            assert!((concept_intensity(&scaled(&g, s), cid) - f64::from(s) * base).abs() < 1e-5);
        }
    }
    let uniform = LatentGrid::from_cells(2, 2, 3, vec![SparseLatent::from_pairs(vec![(1, 0.75f32)]); 4]).unwrap();
    assert_eq!(concept_intensity(&uniform, 1), 0.75);
}

#[test]
fn top_twenty_matches_full_sort_and_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grids: Vec<LatentGrid<f32>> = (0..20).map(|_| random_grid(&mut rng, 3, 3, 4)).collect();
    let ids: Vec<u64> = (0..20).map(|i| 1000 - 7 * i).collect();
    let rank = |gs: &[LatentGrid<f32>]| {
        let items = gs
            .iter()
            .zip(&ids)
            .map(|(g, &id)| ConceptIntensity { cid: 2, image_id: id, gamma: concept_intensity(g, 2) })
            .collect();
        rank_top_examples(items, 20)
    };
    let got = rank(&grids);
    let mut want: Vec<(f64, u64)> = grids.iter().zip(&ids).map(|(g, &id)| (concept_intensity(g, 2), id)).collect();
    want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    assert_eq!(got.iter().map(|c| c.image_id).collect::<Vec<_>>(), want.iter().map(|w| w.1).collect::<Vec<_>>());
    let rescaled: Vec<LatentGrid<f32>> = grids.iter().map(|g| scaled(g, 2.0)).collect();
    assert_eq!(
        rank(&rescaled).iter().map(|c| c.image_id).collect::<Vec<_>>(),
        got.iter().map(|c| c.image_id).collect::<Vec<_>>()
    );
    let silent: Vec<ConceptIntensity> = [5u64, 1, 3]
        .iter()
        .map(|&id| ConceptIntensity { cid: 0, image_id: id, gamma: 0.0 })
        .collect();
    assert_eq!(rank_top_examples(silent, 2).iter().map(|c| c.image_id).collect::<Vec<_>>(), vec![1, 3]);
}

#[test]
fn context_free_matches_two_pass_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w, n_f, n) = (3, 2, 5, 12);
    let mut grids: Vec<LatentGrid<f32>> = (0..n).map(|_| random_grid(&mut rng, h, w, n_f)).collect();
    // Concept 4 fires identically in one corner; concept 3 never fires.
    for g in grids.iter_mut() {
        let cells = g
            .cells()
            .iter()
            .enumerate()
            .map(|(p, c)| {
                let mut pairs: Vec<(usize, f32)> = c.iter().filter(|(i, _)| *i < 3).collect();
                if p == 0 {
                    pairs.push((4, 1.5));
                }
                SparseLatent::from_pairs(pairs)
            })
            .collect();
        *g = LatentGrid::from_cells(h, w, n_f, cells).unwrap();
    }
    let mut sv = SpatialVariance::new(n_f, h, w);
    for g in &grids {
        sv.add(g).unwrap();
    }
    let got = sv.context_free(10).unwrap();
    assert_eq!(got.len(), 4);
    assert_eq!(got[0].cid, 4);
    assert!(got[0].score.abs() < 1e-12);
    assert!(got.iter().all(|c| c.cid != 3));
    for c in &got {
        let mut score = 0.0;
        for p in 0..h * w {
            let vals: Vec<f64> = grids.iter().map(|g| f64::from(g.cells()[p].to_dense(n_f)[c.cid])).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((c.mean_map[p] - mean).abs() < 1e-9);
            assert!((c.variance_map[p] - var).abs() < 1e-9);
            score += var;
        }
        assert!((c.score - score / (h * w) as f64).abs() < 1e-9);
    }
    for pair in got.windows(2) {
        assert!(pair[0].score <= pair[1].score);
    }
    let mut one = SpatialVariance::new(n_f, h, w);
    one.add(&grids[0]).unwrap();
    assert!(one.context_free(3).is_err());
}

#[test]
fn edit_success_strict_increase() {
    let rec = |b: f64, a: f64| EditRecord { id: "x".into(), clip_before: b, clip_after: a, lpips: 0.1 };
    let all = edit_success_table(&[rec(0.2, 0.3), rec(0.1, 0.4)]).unwrap();
    assert_eq!(all.success_rate, 1.0);
    assert!((all.delta - 0.2).abs() < 1e-12);
    let flat = edit_success_table(&[rec(0.2, 0.2), rec(0.5, 0.5)]).unwrap();
    assert_eq!(flat.success_rate, 0.0);
    assert!(edit_success_table(&[]).is_err());
}
