// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with bias correction over the three SAE parameter tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Result};
use crate::loss::Gradients;
use crate::sae::SaeModel;
use crate::scalar::Scalar;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m_enc: Vec<T>,
    pub v_enc: Vec<T>,
    pub m_b: Vec<T>,
    pub v_b: Vec<T>,
    pub m_dec: Vec<T>,
    pub v_dec: Vec<T>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(d: usize, n_f: usize, learning_rate: f64) -> Self {
        Self {
            m_enc: vec![T::zero(); n_f * d],
            v_enc: vec![T::zero(); n_f * d],
            m_b: vec![T::zero(); d],
            v_b: vec![T::zero(); d],
            m_dec: vec![T::zero(); n_f * d],
            v_dec: vec![T::zero(); n_f * d],
            step: 0,
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    pub fn for_model(model: &SaeModel<T>, learning_rate: f64) -> Self {
        Self::new(model.d(), model.n_f(), learning_rate)
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.m_enc,
            &self.v_enc,
            &self.m_b,
            &self.v_b,
            &self.m_dec,
            &self.v_dec,
        ]
        .iter()
        .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// One bias-corrected Adam update of every model parameter.
pub fn adam_step<T: Scalar>(
    model: &mut SaeModel<T>,
    opt: &mut OptimizerState<T>,
    grads: &Gradients<T>,
) -> Result<()> {
    let d = model.d();
    let n_f = model.n_f();
    check_len("encoder gradient", n_f * d, grads.w_enc.len())?;
    check_len("decoder gradient", n_f * d, grads.w_dec.len())?;
    check_len("bias gradient", d, grads.b.len())?;
    check_len("encoder moments", n_f * d, opt.m_enc.len())?;
    check_len("decoder moments", n_f * d, opt.m_dec.len())?;
    check_len("bias moments", d, opt.m_b.len())?;

    opt.step += 1;
    let t = opt.step as f64;
    let consts = Consts {
        beta1: T::from_f64_lossy(opt.beta1),
        beta2: T::from_f64_lossy(opt.beta2),
        bc1: T::from_f64_lossy(1.0 - num_traits::Float::powf(opt.beta1, t)),
        bc2: T::from_f64_lossy(1.0 - num_traits::Float::powf(opt.beta2, t)),
        lr: T::from_f64_lossy(opt.learning_rate),
        eps: T::from_f64_lossy(opt.eps),
    };
    update(model.encoder_mut(), &mut opt.m_enc, &mut opt.v_enc, &grads.w_enc, &consts);
    update(model.bias_mut(), &mut opt.m_b, &mut opt.v_b, &grads.b, &consts);
    update(model.decoder_mut(), &mut opt.m_dec, &mut opt.v_dec, &grads.w_dec, &consts);
    Ok(())
}

struct Consts<T> {
    beta1: T,
    beta2: T,
    bc1: T,
    bc2: T,
    lr: T,
    eps: T,
}

fn update<T: Scalar>(params: &mut [T], m: &mut [T], v: &mut [T], g: &[T], c: &Consts<T>) {
    let one = T::one();
    for i in 0..params.len() {
        let gi = g[i];
        m[i] = c.beta1 * m[i] + (one - c.beta1) * gi;
        v[i] = c.beta2 * v[i] + (one - c.beta2) * gi * gi;
        let m_hat = m[i] / c.bc1;
        let v_hat = v[i] / c.bc2;
        params[i] = params[i] - c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}
