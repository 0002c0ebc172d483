// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoder.
//!
//! The encoder computes `z = TopK(ReLU(W_enc (x - b)))` and the decoder
//! `x̂ = W_dec z + b`, with the bias shared between the two. Column `i` of the
//! decoder matrix is the concept vector of latent `i`.
//!
//! Both weight matrices are stored as `n_f` contiguous rows of length `d`:
//! row `i` of `w_enc` is the encoder direction of latent `i`, row `i` of
//! `w_dec` is the concept vector `f_i`. The checkpoint format converts the
//! decoder to its `d × n_f` row-major layout on the way out.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::scalar::{all_finite, dot, Scalar};

/// Sparse latent code: ascending indices with their values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseLatent<T> {
    pub indices: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> SparseLatent<T> {
    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a code from `(index, value)` pairs, sorting by index.
    pub fn from_pairs(mut pairs: Vec<(usize, T)>) -> Self {
        pairs.sort_by_key(|&(i, _)| i);
        let (indices, values) = pairs.into_iter().unzip();
        Self { indices, values }
    }

    pub fn from_dense(z: &[T]) -> Self {
        let pairs = z
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_zero())
            .map(|(i, &v)| (i, v))
            .collect();
        Self::from_pairs(pairs)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, index: usize) -> T {
        match self.indices.binary_search(&index) {
            Ok(pos) => self.values[pos],
            Err(_) => T::zero(),
        }
    }

    pub fn to_dense(&self, n_f: usize) -> Vec<T> {
        let mut z = vec![T::zero(); n_f];
        for (i, v) in self.iter() {
            z[i] = v;
        }
        z
    }

    pub fn l2_norm(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

/// Keeps the `k` largest strictly positive entries of `pre`.
///
/// Ties on equal values go to the lower index, so the result is a pure
/// function of the input.
pub fn top_k_relu<T: Scalar>(pre: &[T], k: usize) -> SparseLatent<T> {
    let mut candidates: Vec<usize> = (0..pre.len()).filter(|&i| pre[i] > T::zero()).collect();
    if candidates.len() > k {
        let rank = |a: &usize, b: &usize| -> Ordering {
            pre[*b]
                .partial_cmp(&pre[*a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        if k == 0 {
            candidates.clear();
        } else {
            candidates.select_nth_unstable_by(k - 1, rank);
            candidates.truncate(k);
        }
    }
    candidates.sort_unstable();
    let values = candidates.iter().map(|&i| pre[i]).collect();
    SparseLatent {
        indices: candidates,
        values,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel<T = f32> {
    d: usize,
    n_f: usize,
    k: usize,
    w_enc: Vec<T>,
    w_dec: Vec<T>,
    b: Vec<T>,
}

impl<T: Scalar> SaeModel<T> {
    /// Assembles a model from raw parameters. `w_dec` holds the concept
    /// vectors back to back (`n_f` rows of `d`).
    pub fn from_parts(
        d: usize,
        n_f: usize,
        k: usize,
        w_enc: Vec<T>,
        w_dec: Vec<T>,
        b: Vec<T>,
    ) -> Result<Self> {
        validate_dims(d, n_f, k)?;
        check_len("encoder weights", n_f * d, w_enc.len())?;
        check_len("decoder weights", n_f * d, w_dec.len())?;
        check_len("bias", d, b.len())?;
        if !(all_finite(&w_enc) && all_finite(&w_dec) && all_finite(&b)) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self {
            d,
            n_f,
            k,
            w_enc,
            w_dec,
            b,
        })
    }

    /// Gaussian decoder columns normalized to unit length, encoder set to the
    /// decoder transpose, zero bias.
    pub fn init_random<R: Rng + ?Sized>(d: usize, n_f: usize, k: usize, rng: &mut R) -> Result<Self> {
        validate_dims(d, n_f, k)?;
        let mut w_dec = Vec::with_capacity(n_f * d);
        for _ in 0..n_f {
            loop {
                let col: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let norm = num_traits::Float::sqrt(col.iter().map(|v| v * v).sum::<f64>());
                if norm > 1e-12 {
                    w_dec.extend(col.iter().map(|v| T::from_f64_lossy(v / norm)));
                    break;
                }
            }
        }
        let w_enc = w_dec.clone();
        Ok(Self {
            d,
            n_f,
            k,
            w_enc,
            w_dec,
            b: vec![T::zero(); d],
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bias(&self) -> &[T] {
        &self.b
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.b
    }

    /// Encoder weights, `n_f` rows of length `d`.
    pub fn encoder(&self) -> &[T] {
        &self.w_enc
    }

    pub fn encoder_mut(&mut self) -> &mut [T] {
        &mut self.w_enc
    }

    /// Decoder weights as concept vectors, `n_f` rows of length `d`.
    pub fn decoder(&self) -> &[T] {
        &self.w_dec
    }

    pub fn decoder_mut(&mut self) -> &mut [T] {
        &mut self.w_dec
    }

    pub fn encoder_row(&self, latent: usize) -> &[T] {
        &self.w_enc[latent * self.d..(latent + 1) * self.d]
    }

    /// Concept vector `f_i`, i.e. column `i` of the decoder matrix.
    pub fn concept_vector(&self, cid: usize) -> &[T] {
        &self.w_dec[cid * self.d..(cid + 1) * self.d]
    }

    /// Decoder in its mathematical `d × n_f` row-major layout.
    pub fn decoder_row_major(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.d * self.n_f];
        for i in 0..self.n_f {
            for r in 0..self.d {
                out[r * self.n_f + i] = self.w_dec[i * self.d + r];
            }
        }
        out
    }

    /// Inverse of [`decoder_row_major`](Self::decoder_row_major).
    pub fn decoder_from_row_major(d: usize, n_f: usize, row_major: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); d * n_f];
        for r in 0..d {
            for i in 0..n_f {
                out[i * d + r] = row_major[r * n_f + i];
            }
        }
        out
    }

    /// Sets the shared bias to the mean of a `rows × d` batch.
    pub fn set_bias_to_mean(&mut self, batch: &[T]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        check_len("batch length (multiple of d)", 0, batch.len() % self.d)?;
        let rows = batch.len() / self.d;
        let mut acc = vec![0.0f64; self.d];
        for row in batch.chunks_exact(self.d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        for (b, a) in self.b.iter_mut().zip(acc) {
            *b = T::from_f64_lossy(a / rows as f64);
        }
        Ok(())
    }

    /// `W_enc (x - b)` for every latent, written into `out`.
    pub fn pre_activations_into(&self, x: &[T], centered: &mut Vec<T>, out: &mut Vec<T>) {
        centered.clear();
        centered.extend(x.iter().zip(&self.b).map(|(&xi, &bi)| xi - bi));
        out.clear();
        out.extend(self.w_enc.chunks_exact(self.d).map(|row| dot(row, centered)));
    }

    pub fn pre_activations(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut centered = Vec::with_capacity(self.d);
        let mut out = Vec::with_capacity(self.n_f);
        self.pre_activations_into(x, &mut centered, &mut out);
        Ok(out)
    }

    pub fn encode(&self, x: &[T]) -> Result<SparseLatent<T>> {
        let pre = self.pre_activations(x)?;
        Ok(top_k_relu(&pre, self.k))
    }

    /// `W_dec z + b`.
    pub fn decode(&self, z: &SparseLatent<T>) -> Result<Vec<T>> {
        let mut out = self.b.clone();
        for (i, v) in z.iter() {
            if i >= self.n_f {
                return Err(Error::DimensionMismatch {
                    what: "latent index bound",
                    expected: self.n_f,
                    found: i,
                });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("latent code"));
            }
            for (o, &f) in out.iter_mut().zip(self.concept_vector(i)) {
                *o = *o + v * f;
            }
        }
        Ok(out)
    }

    pub fn decode_dense(&self, z: &[T]) -> Result<Vec<T>> {
        check_len("latent length", self.n_f, z.len())?;
        self.decode(&SparseLatent::from_dense(z))
    }

    pub fn reconstruct(&self, x: &[T]) -> Result<Vec<T>> {
        self.decode(&self.encode(x)?)
    }

    /// Converts the parameters to another float type.
    pub fn cast<U: Scalar>(&self) -> SaeModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        SaeModel {
            d: self.d,
            n_f: self.n_f,
            k: self.k,
            w_enc: conv(&self.w_enc),
            w_dec: conv(&self.w_dec),
            b: conv(&self.b),
        }
    }

    pub fn params_finite(&self) -> bool {
        all_finite(&self.w_enc) && all_finite(&self.w_dec) && all_finite(&self.b)
    }

    pub(crate) fn check_input(&self, x: &[T]) -> Result<()> {
        check_len("input vector", self.d, x.len())?;
        if !all_finite(x) {
            return Err(Error::NonFinite("input vector"));
        }
        Ok(())
    }
}

fn validate_dims(d: usize, n_f: usize, k: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidArgument("d must be at least 1".into()));
    }
    if n_f < d {
        return Err(Error::InvalidArgument(alloc::format!(
            "n_f ({n_f}) must be at least d ({d})"
        )));
    }
    if k == 0 || k > n_f {
        return Err(Error::InvalidArgument(alloc::format!(
            "k ({k}) must lie in 1..={n_f}"
        )));
    }
    Ok(())
}
