// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic data with a known sparse dictionary, used as the training oracle.
//!
//! Every vector is `bias + Σ c_j · atom_j + noise` over `k_true` distinct atoms
//! with coefficients uniform in `coeff_range` and Gaussian noise of standard
//! deviation `noise_sigma` per channel.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::error::{check_len, Error, Result};
use crate::sae::{SaeModel, SparseLatent};
use crate::scalar::{cosine, Scalar};

pub const DEFAULT_COEFF_RANGE: (f32, f32) = (0.5, 2.0);

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlantedProblem {
    pub d: usize,
    pub n_f: usize,
    /// `n_f` unit-norm atoms of length `d`, back to back.
    pub dictionary: Vec<f32>,
    pub bias: Vec<f32>,
    pub k_true: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    pub coeff_range: (f32, f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSample {
    /// `n × d` row-major.
    pub vectors: Vec<f32>,
    /// Ground-truth code of each vector.
    pub codes: Vec<SparseLatent<f32>>,
}

impl PlantedProblem {
    /// Random Gaussian atoms (normalized) and a standard-normal bias, both
    /// drawn from `seed`.
    pub fn random(d: usize, n_f: usize, k_true: usize, noise_sigma: f32, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dictionary = Vec::with_capacity(n_f * d);
        for _ in 0..n_f {
            loop {
                let col: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = num_traits::Float::sqrt(col.iter().map(|v| v * v).sum::<f64>());
                if norm > 1e-9 {
                    dictionary.extend(col.iter().map(|v| (v / norm) as f32));
                    break;
                }
            }
        }
        let bias = (0..d)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Self::new(d, n_f, dictionary, bias, k_true, noise_sigma, seed)
    }

    pub fn new(
        d: usize,
        n_f: usize,
        dictionary: Vec<f32>,
        bias: Vec<f32>,
        k_true: usize,
        noise_sigma: f32,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || n_f == 0 {
            return Err(Error::InvalidArgument("d and n_f must be positive".into()));
        }
        check_len("planted dictionary", n_f * d, dictionary.len())?;
        check_len("planted bias", d, bias.len())?;
        if k_true > n_f {
            return Err(Error::InvalidArgument(alloc::format!(
                "k_true ({k_true}) exceeds n_f ({n_f})"
            )));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be finite and >= 0".into()));
        }
        for atom in dictionary.chunks_exact(d) {
            let norm = num_traits::Float::sqrt(atom.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>());
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "planted atom has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self {
            d,
            n_f,
            dictionary,
            bias,
            k_true,
            noise_sigma,
            seed,
            coeff_range: DEFAULT_COEFF_RANGE,
        })
    }

    pub fn with_coeff_range(mut self, lo: f32, hi: f32) -> Result<Self> {
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument("coefficient range must satisfy lo <= hi".into()));
        }
        self.coeff_range = (lo, hi);
        Ok(self)
    }

    pub fn atom(&self, i: usize) -> &[f32] {
        &self.dictionary[i * self.d..(i + 1) * self.d]
    }

    /// Draws `n` vectors from the sample stream of this problem's seed.
    pub fn generate(&self, n: usize) -> PlantedSample {
        self.generate_stream(n, 1)
    }

    /// Like [`generate`](Self::generate) on an independent stream, e.g. for a
    /// held-out split.
    pub fn generate_stream(&self, n: usize, stream: u64) -> PlantedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let coeff = Uniform::new_inclusive(self.coeff_range.0, self.coeff_range.1)
            .expect("validated coefficient range");
        let noise = Normal::new(0.0f32, self.noise_sigma).expect("validated sigma");
        let mut vectors = Vec::with_capacity(n * self.d);
        let mut codes = Vec::with_capacity(n);
        let mut x = vec![0.0f32; self.d];
        for _ in 0..n {
            let mut atoms = index::sample(&mut rng, self.n_f, self.k_true).into_vec();
            atoms.sort_unstable();
            let code: Vec<(usize, f32)> = atoms.iter().map(|&a| (a, coeff.sample(&mut rng))).collect();
            x.copy_from_slice(&self.bias);
            for &(a, c) in &code {
                for (xi, &f) in x.iter_mut().zip(self.atom(a)) {
                    *xi += c * f;
                }
            }
            if self.noise_sigma > 0.0 {
                for xi in x.iter_mut() {
                    *xi += noise.sample(&mut rng);
                }
            }
            vectors.extend_from_slice(&x);
            codes.push(SparseLatent::from_pairs(code));
        }
        PlantedSample { vectors, codes }
    }
}

/// Mean over true atoms of the best `|cos|` against any learned concept vector.
pub fn dictionary_recovery_score<T: Scalar>(model: &SaeModel<T>, problem: &PlantedProblem) -> Result<f64> {
    check_len("model d vs planted d", problem.d, model.d())?;
    let learned: Vec<Vec<f64>> = (0..model.n_f())
        .map(|i| model.concept_vector(i).iter().map(|v| v.as_f64()).collect())
        .collect();
    let mut total = 0.0;
    for j in 0..problem.n_f {
        let truth: Vec<f64> = problem.atom(j).iter().map(|&v| f64::from(v)).collect();
        let best = learned
            .iter()
            .map(|f| cosine(&truth, f).abs())
            .fold(0.0f64, f64::max);
        total += best;
    }
    Ok(total / problem.n_f as f64)
}

/// Draws a random index subset; exposed for fixtures that need the same
/// sampling scheme as the generator.
pub fn sample_support<R: Rng + ?Sized>(rng: &mut R, n_f: usize, k: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n_f, k).into_vec();
    v.sort_unstable();
    v
}
