// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reconstruction and AuxK losses with their analytic gradients.
//!
//! Per sample, with `u = x - b`, `p = W_enc u`, active set `A = TopK(ReLU(p))`:
//!
//! ```text
//! x̂ = b + Σ_{i∈A} p_i f_i          r = x̂ - x,  e = -r
//! ê = Σ_{j∈D} p_j f_j              D = top-k_aux positive p_j over dead j
//! L = mean ‖r‖² + α · mean ‖e - ê‖²
//! ```
//!
//! `A` and `D` are held fixed when differentiating, so the gradients are exact
//! wherever the selection is locally constant. `ê` carries no bias term. When
//! no latent is dead the auxiliary term is zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::sae::{top_k_relu, SaeModel};
use crate::scalar::{all_finite, dot, Scalar};
use crate::tracker::DeadLatentTracker;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub rec: T,
    pub aux: T,
    pub total: T,
    pub alpha: T,
}

/// Gradients laid out exactly like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub w_enc: Vec<T>,
    pub w_dec: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(d: usize, n_f: usize) -> Self {
        Self {
            w_enc: vec![T::zero(); n_f * d],
            w_dec: vec![T::zero(); n_f * d],
            b: vec![T::zero(); d],
        }
    }

    pub fn zeros_like(model: &SaeModel<T>) -> Self {
        Self::zeros(model.d(), model.n_f())
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    pub loss: LossBreakdown<T>,
    pub grads: Gradients<T>,
    /// Latents selected by TopK, per sample.
    pub active_sets: Vec<Vec<usize>>,
    /// Dead latents used for the auxiliary reconstruction, per sample.
    pub aux_sets: Vec<Vec<usize>>,
}

/// Loss and gradients over an `n × d` row-major batch.
pub fn loss_and_grads<T: Scalar>(
    model: &SaeModel<T>,
    batch: &[T],
    tracker: &DeadLatentTracker,
    alpha: T,
    k_aux: usize,
) -> Result<LossAndGrads<T>> {
    let d = model.d();
    let n_f = model.n_f();
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_len("batch length (multiple of d)", 0, batch.len() % d)?;
    check_len("tracker latents", n_f, tracker.n_f())?;
    if !all_finite(batch) {
        return Err(Error::NonFinite("batch"));
    }
    let rows = batch.len() / d;
    let dead = tracker.dead_mask();
    let any_dead = dead.iter().any(|&x| x);
    let two = T::from_f64_lossy(2.0);
    let inv_n = T::one() / T::from_f64_lossy(rows as f64);

    let mut grads = Gradients::zeros(d, n_f);
    let mut rec_sum = T::zero();
    let mut aux_sum = T::zero();
    let mut active_sets = Vec::with_capacity(rows);
    let mut aux_sets = Vec::with_capacity(rows);

    let mut centered = Vec::with_capacity(d);
    let mut pre = Vec::with_capacity(n_f);
    let mut masked = vec![T::zero(); n_f];
    let mut r = vec![T::zero(); d];
    let mut q = vec![T::zero(); d];
    let mut g_xhat = vec![T::zero(); d];
    let mut g_ehat = vec![T::zero(); d];
    let mut g_u = vec![T::zero(); d];

    for x in batch.chunks_exact(d) {
        model.pre_activations_into(x, &mut centered, &mut pre);
        let active = top_k_relu(&pre, model.k());

        // r = x̂ - x
        for ((ri, &bi), &xi) in r.iter_mut().zip(model.bias()).zip(x) {
            *ri = bi - xi;
        }
        for (i, zi) in active.iter() {
            for (ri, &f) in r.iter_mut().zip(model.concept_vector(i)) {
                *ri = *ri + zi * f;
            }
        }
        rec_sum = rec_sum + dot(&r, &r);

        let aux_active = if any_dead {
            for (m, (&p, &is_dead)) in masked.iter_mut().zip(pre.iter().zip(&dead)) {
                *m = if is_dead { p } else { T::zero() };
            }
            let sel = top_k_relu(&masked, k_aux);
            // q = e - ê = -r - ê
            for (qi, &ri) in q.iter_mut().zip(&r) {
                *qi = -ri;
            }
            for (j, pj) in sel.iter() {
                for (qi, &f) in q.iter_mut().zip(model.concept_vector(j)) {
                    *qi = *qi - pj * f;
                }
            }
            aux_sum = aux_sum + dot(&q, &q);
            sel
        } else {
            q.iter_mut().for_each(|v| *v = T::zero());
            crate::sae::SparseLatent::empty()
        };

        for i in 0..d {
            g_xhat[i] = (two * r[i] - two * alpha * q[i]) * inv_n;
            g_ehat[i] = -two * alpha * q[i] * inv_n;
        }
        g_u.iter_mut().for_each(|v| *v = T::zero());

        for (i, zi) in active.iter() {
            let g_pre = dot(model.concept_vector(i), &g_xhat);
            let gd = &mut grads.w_dec[i * d..(i + 1) * d];
            for (g, &gx) in gd.iter_mut().zip(&g_xhat) {
                *g = *g + gx * zi;
            }
            accumulate_encoder(model, &mut grads, &mut g_u, &centered, i, g_pre);
        }
        for (j, pj) in aux_active.iter() {
            let g_pre = dot(model.concept_vector(j), &g_ehat);
            let gd = &mut grads.w_dec[j * d..(j + 1) * d];
            for (g, &ge) in gd.iter_mut().zip(&g_ehat) {
                *g = *g + ge * pj;
            }
            accumulate_encoder(model, &mut grads, &mut g_u, &centered, j, g_pre);
        }
        for i in 0..d {
            grads.b[i] = grads.b[i] + g_xhat[i] - g_u[i];
        }

        active_sets.push(active.indices);
        aux_sets.push(aux_active.indices);
    }

    let rec = rec_sum * inv_n;
    let aux = aux_sum * inv_n;
    Ok(LossAndGrads {
        loss: LossBreakdown {
            rec,
            aux,
            total: rec + alpha * aux,
            alpha,
        },
        grads,
        active_sets,
        aux_sets,
    })
}

fn accumulate_encoder<T: Scalar>(
    model: &SaeModel<T>,
    grads: &mut Gradients<T>,
    g_u: &mut [T],
    centered: &[T],
    latent: usize,
    g_pre: T,
) {
    let d = model.d();
    let ge = &mut grads.w_enc[latent * d..(latent + 1) * d];
    for (g, &u) in ge.iter_mut().zip(centered) {
        *g = *g + g_pre * u;
    }
    for (gu, &w) in g_u.iter_mut().zip(model.encoder_row(latent)) {
        *gu = *gu + g_pre * w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_model(d: usize, n_f: usize, k: usize) -> SaeModel<f64> {
        let mut w = vec![0.0; n_f * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        SaeModel::from_parts(d, n_f, k, w.clone(), w, vec![0.0; d]).unwrap()
    }

    #[test]
    fn perfect_model_has_zero_reconstruction_loss() {
        let m = diag_model(3, 4, 3);
        let t = DeadLatentTracker::new(4, 10);
        let out = loss_and_grads(&m, &[1.0, 2.0, 0.5, 0.25, 3.0, 1.5], &t, 1.0 / 32.0, 2).unwrap();
        assert_eq!(out.loss.rec, 0.0);
        assert_eq!(out.loss.aux, 0.0);
        assert_eq!(out.loss.total, out.loss.rec);
    }

    #[test]
    fn no_dead_latents_means_no_aux() {
        let m = diag_model(3, 4, 1);
        let t = DeadLatentTracker::new(4, 10);
        let out = loss_and_grads(&m, &[1.0, 2.0, 0.5], &t, 0.5, 2).unwrap();
        assert!(out.loss.rec > 0.0);
        assert_eq!(out.loss.aux, 0.0);
        assert_eq!(out.loss.total, out.loss.rec);
        assert!(out.aux_sets.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn dead_latents_feed_aux_reconstruction() {
        let m = diag_model(3, 4, 1);
        // Threshold 0 marks every latent dead.
        let t = DeadLatentTracker::new(4, 0);
        let out = loss_and_grads(&m, &[1.0, 2.0, 0.5], &t, 0.5, 2).unwrap();
        assert_eq!(out.active_sets, vec![vec![1]]);
        assert_eq!(out.aux_sets, vec![vec![0, 1]]);
        // e = [1, 0, 0.5]; ê = [1, 2, 0]; e - ê = [0, -2, 0.5]
        assert!((out.loss.aux - 4.25).abs() < 1e-12);
        assert_eq!(out.loss.total, out.loss.rec + 0.5 * out.loss.aux);
    }

    #[test]
    fn rejects_bad_batches() {
        let m = diag_model(3, 4, 1);
        let t = DeadLatentTracker::new(4, 10);
        assert!(matches!(loss_and_grads(&m, &[], &t, 0.5, 2), Err(Error::Empty(_))));
        assert!(matches!(
            loss_and_grads(&m, &[1.0, f64::NAN, 0.0], &t, 0.5, 2),
            Err(Error::NonFinite(_))
        ));
        assert!(loss_and_grads(&m, &[1.0, 2.0], &t, 0.5, 2).is_err());
    }
}
