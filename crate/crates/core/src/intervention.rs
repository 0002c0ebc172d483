// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation edits driven by concept vectors.
//!
//! With `F = Σ_{c∈C} f_c` and `Z[i,j] = encode(Δ[i,j])`:
//!
//! - spatial: `Δ[i,j] + β‖Z[i,j]‖ F` inside the region, `Δ[i,j] − F` outside;
//! - global: `Δ[i,j] + β̃_ij f_c` with `β̃_ij = β ‖Z[i,j]‖ / Σ ‖Z‖`;
//! - latent spatial: set the `C` coordinates of `Z[i,j]` to `β` inside the
//!   region and `0` outside, then decode.
//!
//! Latent norms are taken before the edit. Locations whose additive
//! coefficient is exactly zero are left bit-for-bit untouched.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::concepts::ConceptDictionary;
use crate::error::{check_len, Error, Result};
use crate::mask::{Mask, Quadrant};
use crate::sae::{SaeModel, SparseLatent};
use crate::scalar::{all_finite, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EditMode {
    Spatial,
    Global,
    LatentSpatial,
}

impl EditMode {
    pub fn wire_code(self) -> u8 {
        match self {
            EditMode::Spatial => 1,
            EditMode::Global => 2,
            EditMode::LatentSpatial => 3,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(EditMode::Spatial),
            2 => Some(EditMode::Global),
            3 => Some(EditMode::LatentSpatial),
            _ => None,
        }
    }

    pub fn needs_region(self) -> bool {
        !matches!(self, EditMode::Global)
    }
}

impl fmt::Display for EditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditMode::Spatial => "spatial",
            EditMode::Global => "global",
            EditMode::LatentSpatial => "latent_spatial",
        })
    }
}

/// Phase of the reverse process, by normalized timestep (1 = pure noise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    /// `t ∈ [0.6, 1.0]`
    Early,
    /// `t ∈ [0.2, 0.6)`
    Middle,
    /// `t ∈ [0.0, 0.2)`
    Final,
}

impl Stage {
    pub fn of(t: f64) -> Self {
        if t >= 0.6 {
            Stage::Early
        } else if t >= 0.2 {
            Stage::Middle
        } else {
            Stage::Final
        }
    }

    pub fn window(self) -> TimestepWindow {
        match self {
            Stage::Early => TimestepWindow { lo: 0.6, hi: 1.0 },
            Stage::Middle => TimestepWindow { lo: 0.2, hi: 0.6 },
            Stage::Final => TimestepWindow { lo: 0.0, hi: 0.2 },
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "early" => Ok(Stage::Early),
            "middle" => Ok(Stage::Middle),
            "final" => Ok(Stage::Final),
            other => Err(Error::InvalidArgument(alloc::format!("unknown stage {other:?}"))),
        }
    }
}

/// Tuned strengths per edit type and stage. Latent-space edits have no
/// tuned default.
pub fn default_beta(mode: EditMode, stage: Stage) -> Option<f64> {
    match (mode, stage) {
        (EditMode::Spatial, Stage::Early) => Some(4000.0),
        (EditMode::Spatial, Stage::Middle) => Some(400.0),
        (EditMode::Spatial, Stage::Final) => Some(1000.0),
        (EditMode::Global, Stage::Early) => Some(8.0),
        (EditMode::Global, Stage::Middle) => Some(10.0),
        (EditMode::Global, Stage::Final) => Some(10.0),
        (EditMode::LatentSpatial, _) => None,
    }
}

/// Closed interval of normalized timesteps.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimestepWindow {
    pub lo: f64,
    pub hi: f64,
}

impl TimestepWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidArgument(alloc::format!(
                "timestep window [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Quadrant(Quadrant),
    Mask(Mask),
}

impl Region {
    pub fn to_mask(&self, h: usize, w: usize) -> Result<Mask> {
        match self {
            Region::Quadrant(q) => Ok(q.mask(h, w)),
            Region::Mask(m) => {
                check_len("region height", h, m.h())?;
                check_len("region width", w, m.w())?;
                Ok(m.clone())
            }
        }
    }
}

/// Resolves an object label to every concept whose dictionary entry lists it.
pub fn resolve_label(dict: &ConceptDictionary, label: &str) -> Result<Vec<usize>> {
    let cids = dict.cids_for_label(label);
    if cids.is_empty() {
        return Err(Error::NotFound(alloc::format!("no concept carries label {label:?}")));
    }
    Ok(cids)
}

/// A fully resolved edit: concrete concept ids, optional region and strength.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedEdit {
    mode: EditMode,
    cids: Vec<usize>,
    region: Option<Region>,
    beta: f64,
}

impl ResolvedEdit {
    pub fn new(mode: EditMode, cids: Vec<usize>, region: Option<Region>, beta: f64) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::NonFinite("beta"));
        }
        if cids.is_empty() {
            return Err(Error::Empty("target concept set"));
        }
        match (mode.needs_region(), region.is_some()) {
            (true, false) => {
                return Err(Error::InvalidArgument(alloc::format!("{mode} edit requires a region")))
            }
            (false, true) => {
                return Err(Error::InvalidArgument("global edit takes no region".into()))
            }
            _ => {}
        }
        if mode == EditMode::Global && cids.len() != 1 {
            return Err(Error::InvalidArgument(alloc::format!(
                "global edit takes exactly one concept, got {}",
                cids.len()
            )));
        }
        Ok(Self {
            mode,
            cids,
            region,
            beta,
        })
    }

    pub fn mode(&self) -> EditMode {
        self.mode
    }

    pub fn cids(&self) -> &[usize] {
        &self.cids
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn region(&self) -> Option<&Region> {
        self.region.as_ref()
    }

    /// Applies the edit to an `h × w × d` tensor.
    pub fn apply<T: Scalar>(&self, model: &SaeModel<T>, delta: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        match self.mode {
            EditMode::Spatial => {
                let region = self.region_mask(h, w)?;
                spatial_edit(model, delta, h, w, &self.cids, &region, self.beta)
            }
            EditMode::LatentSpatial => {
                let region = self.region_mask(h, w)?;
                latent_spatial_edit(model, delta, h, w, &self.cids, &region, self.beta)
            }
            EditMode::Global => global_edit(model, delta, h, w, self.cids[0], self.beta),
        }
    }

    fn region_mask(&self, h: usize, w: usize) -> Result<Mask> {
        self.region
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(String::from("missing region")))?
            .to_mask(h, w)
    }
}

fn check_edit_inputs<T: Scalar>(model: &SaeModel<T>, delta: &[T], h: usize, w: usize, cids: &[usize]) -> Result<()> {
    check_len("activation tensor", h * w * model.d(), delta.len())?;
    if !all_finite(delta) {
        return Err(Error::NonFinite("activation tensor"));
    }
    if cids.is_empty() {
        return Err(Error::Empty("target concept set"));
    }
    if let Some(&bad) = cids.iter().find(|&&c| c >= model.n_f()) {
        return Err(Error::DimensionMismatch {
            what: "concept id bound",
            expected: model.n_f(),
            found: bad,
        });
    }
    Ok(())
}

fn concept_sum<T: Scalar>(model: &SaeModel<T>, cids: &[usize]) -> Vec<T> {
    let mut f = alloc::vec![T::zero(); model.d()];
    for &c in cids {
        for (a, &v) in f.iter_mut().zip(model.concept_vector(c)) {
            *a = *a + v;
        }
    }
    f
}

/// Norm-adaptive spatially targeted edit.
pub fn spatial_edit<T: Scalar>(
    model: &SaeModel<T>,
    delta: &[T],
    h: usize,
    w: usize,
    cids: &[usize],
    region: &Mask,
    beta: f64,
) -> Result<Vec<T>> {
    check_edit_inputs(model, delta, h, w, cids)?;
    let region = Region::Mask(region.clone()).to_mask(h, w)?;
    let d = model.d();
    let f = concept_sum(model, cids);
    let beta = T::from_f64_lossy(beta);
    let mut out = delta.to_vec();
    for (p, (x, inside)) in out.chunks_exact_mut(d).zip(region.bits()).enumerate() {
        if *inside {
            let z = model.encode(&delta[p * d..(p + 1) * d])?;
            let scale = beta * z.l2_norm();
            if scale != T::zero() {
                for (xi, &fi) in x.iter_mut().zip(&f) {
                    *xi = *xi + scale * fi;
                }
            }
        } else {
            for (xi, &fi) in x.iter_mut().zip(&f) {
                *xi = *xi - fi;
            }
        }
    }
    Ok(out)
}

/// Overwrites the target latents and decodes.
pub fn latent_spatial_edit<T: Scalar>(
    model: &SaeModel<T>,
    delta: &[T],
    h: usize,
    w: usize,
    cids: &[usize],
    region: &Mask,
    beta: f64,
) -> Result<Vec<T>> {
    check_edit_inputs(model, delta, h, w, cids)?;
    let region = Region::Mask(region.clone()).to_mask(h, w)?;
    let d = model.d();
    let beta = T::from_f64_lossy(beta);
    let mut out = Vec::with_capacity(delta.len());
    for (x, inside) in delta.chunks_exact(d).zip(region.bits()) {
        let z = model.encode(x)?;
        let mut pairs: Vec<(usize, T)> = z.iter().filter(|(i, _)| !cids.contains(i)).collect();
        if *inside {
            let mut targets = cids.to_vec();
            targets.sort_unstable();
            targets.dedup();
            pairs.extend(targets.into_iter().map(|c| (c, beta)));
        }
        out.extend(model.decode(&SparseLatent::from_pairs(pairs))?);
    }
    Ok(out)
}

/// Norm-normalized global edit along one concept vector.
pub fn global_edit<T: Scalar>(model: &SaeModel<T>, delta: &[T], h: usize, w: usize, cid: usize, beta: f64) -> Result<Vec<T>> {
    check_edit_inputs(model, delta, h, w, &[cid])?;
    let d = model.d();
    let norms = global_strengths_norms(model, delta)?;
    let total: f64 = norms.iter().sum();
    let mut out = delta.to_vec();
    if total == 0.0 {
        return Ok(out);
    }
    let f = model.concept_vector(cid);
    for (x, n) in out.chunks_exact_mut(d).zip(&norms) {
        let scale = T::from_f64_lossy(beta * n / total);
        if scale != T::zero() {
            for (xi, &fi) in x.iter_mut().zip(f) {
                *xi = *xi + scale * fi;
            }
        }
    }
    Ok(out)
}

/// The per-location strength field `β̃_ij` a global edit would use.
pub fn global_strengths<T: Scalar>(model: &SaeModel<T>, delta: &[T], beta: f64) -> Result<Vec<f64>> {
    let norms = global_strengths_norms(model, delta)?;
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return Ok(alloc::vec![0.0; norms.len()]);
    }
    Ok(norms.iter().map(|n| beta * n / total).collect())
}

fn global_strengths_norms<T: Scalar>(model: &SaeModel<T>, delta: &[T]) -> Result<Vec<f64>> {
    delta
        .chunks_exact(model.d())
        .map(|x| Ok(model.encode(x)?.l2_norm().as_f64()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn diag(d: usize, n_f: usize, k: usize) -> SaeModel<f32> {
        let mut w = vec![0.0; n_f * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        SaeModel::from_parts(d, n_f, k, w.clone(), w, vec![0.0; d]).unwrap()
    }

    #[test]
    fn stage_boundaries_and_defaults() {
        assert_eq!(Stage::of(1.0), Stage::Early);
        assert_eq!(Stage::of(0.6), Stage::Early);
        assert_eq!(Stage::of(0.5), Stage::Middle);
        assert_eq!(Stage::of(0.2), Stage::Middle);
        assert_eq!(Stage::of(0.0), Stage::Final);
        assert_eq!(default_beta(EditMode::Spatial, Stage::Early), Some(4000.0));
        assert_eq!(default_beta(EditMode::Spatial, Stage::Middle), Some(400.0));
        assert_eq!(default_beta(EditMode::Spatial, Stage::Final), Some(1000.0));
        assert_eq!(default_beta(EditMode::Global, Stage::Early), Some(8.0));
        assert_eq!(default_beta(EditMode::Global, Stage::Middle), Some(10.0));
        assert_eq!(default_beta(EditMode::Global, Stage::Final), Some(10.0));
        assert_eq!(default_beta(EditMode::LatentSpatial, Stage::Final), None);
    }

    #[test]
    fn window_validation() {
        assert!(TimestepWindow::new(0.6, 1.0).unwrap().contains(0.6));
        assert!(!TimestepWindow::new(0.6, 1.0).unwrap().contains(0.59));
        assert!(TimestepWindow::new(0.7, 0.2).is_err());
        assert!(TimestepWindow::new(-0.1, 0.2).is_err());
    }

    #[test]
    fn zero_beta_full_region_is_identity() {
        let m = diag(3, 4, 2);
        let delta: Vec<f32> = (0..2 * 2 * 3).map(|i| (i as f32 - 5.0) * 0.3).collect();
        let out = spatial_edit(&m, &delta, 2, 2, &[0, 2], &Mask::full(2, 2), 0.0).unwrap();
        assert_eq!(out, delta);
        let out = global_edit(&m, &delta, 2, 2, 1, 0.0).unwrap();
        assert_eq!(out, delta);
    }

    #[test]
    fn zero_latent_inside_and_subtraction_outside() {
        let m = diag(2, 2, 1);
        let delta = vec![0.0f32; 4];
        let region = Mask::from_bits(1, 2, vec![true, false]).unwrap();
        let out = spatial_edit(&m, &delta, 1, 2, &[1], &region, 5.0).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn global_with_uniform_norms_splits_beta_evenly() {
        let m = diag(2, 2, 1);
        let delta = vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 0.0];
        let field = global_strengths(&m, &delta, 6.0).unwrap();
        assert_eq!(field, vec![2.0, 2.0, 2.0]);
        // All-zero latents: no-op.
        let zeros = vec![0.0f32; 6];
        assert_eq!(global_edit(&m, &zeros, 1, 3, 0, 6.0).unwrap(), zeros);
    }

    #[test]
    fn latent_edit_with_all_concepts_zeroed_returns_bias() {
        let mut m = diag(2, 3, 2);
        m.bias_mut().copy_from_slice(&[0.25, -0.5]);
        let delta = vec![1.0f32, 2.0, -3.0, 0.5];
        let out = latent_spatial_edit(&m, &delta, 1, 2, &[0, 1, 2], &Mask::full(1, 2), 0.0).unwrap();
        assert_eq!(out, vec![0.25, -0.5, 0.25, -0.5]);
    }

    #[test]
    fn resolved_edit_validation() {
        let q = Some(Region::Quadrant(Quadrant::TopLeft));
        assert!(ResolvedEdit::new(EditMode::Spatial, vec![], q.clone(), 1.0).is_err());
        assert!(ResolvedEdit::new(EditMode::Spatial, vec![1], None, 1.0).is_err());
        assert!(ResolvedEdit::new(EditMode::Global, vec![1], q.clone(), 1.0).is_err());
        assert!(ResolvedEdit::new(EditMode::Global, vec![1, 2], None, 1.0).is_err());
        assert!(ResolvedEdit::new(EditMode::Spatial, vec![1], q, f64::NAN).is_err());
        let m = diag(2, 2, 1);
        let e = ResolvedEdit::new(EditMode::Spatial, vec![5], Some(Region::Quadrant(Quadrant::TopLeft)), 1.0).unwrap();
        assert!(e.apply(&m, &[0.0; 8], 2, 2).is_err());
        let e = ResolvedEdit::new(EditMode::Spatial, vec![0], Some(Region::Mask(Mask::full(3, 3))), 1.0).unwrap();
        assert!(e.apply(&m, &[0.0; 8], 2, 2).is_err());
    }

    #[test]
    fn wire_codes_round_trip() {
        for m in [EditMode::Spatial, EditMode::Global, EditMode::LatentSpatial] {
            assert_eq!(EditMode::from_wire_code(m.wire_code()), Some(m));
        }
        assert_eq!(EditMode::from_wire_code(0), None);
    }
}
