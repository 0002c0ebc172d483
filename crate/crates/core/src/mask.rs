// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary masks: run-length decoding, resolution changes, binarization of
//! activation maps, IoU, and image quadrants.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{check_len, Error, Result};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        check_len("mask cells", h * w, bits.len())?;
        Ok(Self { h, w, bits })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                bits.push(f(i, j));
            }
        }
        Self { h, w, bits }
    }

    /// Decodes alternating zero/one runs, starting with a (possibly empty)
    /// zero run.
    pub fn from_rle(h: usize, w: usize, counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(Error::DimensionMismatch {
                what: "run-length total",
                expected: h * w,
                found: total as usize,
            });
        }
        let mut bits = Vec::with_capacity(h * w);
        for (n, &run) in counts.iter().enumerate() {
            let value = n % 2 == 1;
            bits.extend(core::iter::repeat(value).take(run as usize));
        }
        Ok(Self { h, w, bits })
    }

    pub fn to_rle(&self) -> Vec<u64> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.w + j] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(Mask {
            h: self.h,
            w: self.w,
            bits,
        })
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Area-majority downsampling: a target cell is set when more than half of
    /// the source pixels it covers are set. Cell `i` covers source rows
    /// `[⌊i·H/h⌋, ⌊(i+1)·H/h⌋)`, widened to at least one row.
    pub fn downsample_majority(&self, h: usize, w: usize) -> Result<Mask> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("target mask shape must be non-empty".into()));
        }
        if self.h == 0 || self.w == 0 {
            return Err(Error::Empty("source mask"));
        }
        let rows = cell_ranges(self.h, h);
        let cols = cell_ranges(self.w, w);
        Ok(Mask::from_fn(h, w, |i, j| {
            let (r0, r1) = rows[i];
            let (c0, c1) = cols[j];
            let mut ones = 0usize;
            for r in r0..r1 {
                ones += self.bits[r * self.w + c0..r * self.w + c1]
                    .iter()
                    .filter(|&&b| b)
                    .count();
            }
            2 * ones > (r1 - r0) * (c1 - c0)
        }))
    }

    /// Nearest-neighbour upsampling, used for figure dumps.
    pub fn upsample_nearest(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |i, j| {
            let si = (i * self.h / h).min(self.h.saturating_sub(1));
            let sj = (j * self.w / w).min(self.w.saturating_sub(1));
            self.get(si, sj)
        })
    }

    fn check_shape(&self, other: &Mask) -> Result<()> {
        check_len("mask height", self.h, other.h)?;
        check_len("mask width", self.w, other.w)
    }
}

fn cell_ranges(source: usize, target: usize) -> Vec<(usize, usize)> {
    (0..target)
        .map(|i| {
            let start = (i * source / target).min(source - 1);
            let end = ((i + 1) * source / target).max(start + 1).min(source);
            (start, end)
        })
        .collect()
}

/// `|a ∧ b| / |a ∨ b|`, zero when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Min-max normalizes `map` to `[0, 1]` and keeps cells strictly above
/// `threshold`. A constant map binarizes to all zeros.
pub fn binarize_map(map: &[f64], h: usize, w: usize, threshold: f64) -> Result<Mask> {
    check_len("activation map cells", h * w, map.len())?;
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activation map"));
    }
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if map.is_empty() || hi <= lo {
        return Ok(Mask::empty(h, w));
    }
    let span = hi - lo;
    let bits = map.iter().map(|&v| (v - lo) / span > threshold).collect();
    Ok(Mask { h, w, bits })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn from_halves(top: bool, left: bool) -> Self {
        match (top, left) {
            (true, true) => Quadrant::TopLeft,
            (true, false) => Quadrant::TopRight,
            (false, true) => Quadrant::BottomLeft,
            (false, false) => Quadrant::BottomRight,
        }
    }

    pub fn is_top(self) -> bool {
        matches!(self, Quadrant::TopLeft | Quadrant::TopRight)
    }

    pub fn is_left(self) -> bool {
        matches!(self, Quadrant::TopLeft | Quadrant::BottomLeft)
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top-left",
            Quadrant::TopRight => "top-right",
            Quadrant::BottomLeft => "bottom-left",
            Quadrant::BottomRight => "bottom-right",
        }
    }

    /// Rows `[0, ⌊h/2⌋)` are top and columns `[0, ⌊w/2⌋)` are left, so on odd
    /// grids the middle row and column go to the bottom and right halves.
    pub fn mask(self, h: usize, w: usize) -> Mask {
        let (top_rows, left_cols) = (h / 2, w / 2);
        Mask::from_fn(h, w, |i, j| {
            Quadrant::from_halves(i < top_rows, j < left_cols) == self
        })
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Quadrant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.trim().to_ascii_lowercase().replace('_', "-");
        Quadrant::ALL
            .into_iter()
            .find(|q| q.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown quadrant {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = Mask::from_bits(2, 2, vec![true, true, false, false]).unwrap();
        let b = Mask::from_bits(2, 2, vec![true, false, true, false]).unwrap();
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let c = Mask::from_bits(2, 2, vec![false, false, true, true]).unwrap();
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert_eq!(iou(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap(), 0.0);
        assert!(iou(&a, &Mask::empty(1, 4)).is_err());
    }

    #[test]
    fn binarize_cases() {
        let m = binarize_map(&[0.0, 5.0, 10.0], 1, 3, 0.1).unwrap();
        assert_eq!(m.bits(), &[false, true, true]);
        assert!(binarize_map(&[3.0; 4], 2, 2, 0.1).unwrap().is_empty());
        assert!(binarize_map(&[0.0, f64::NAN], 1, 2, 0.1).is_err());
    }

    #[test]
    fn binarize_matches_per_pixel_reference() {
        let map: Vec<f64> = (0..64).map(|i| ((i * 37 % 64) as f64 * 0.73).sin()).collect();
        let m = binarize_map(&map, 8, 8, 0.1).unwrap();
        let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (p, &v) in map.iter().enumerate() {
            assert_eq!(m.bits()[p], (v - lo) / (hi - lo) > 0.1);
        }
    }

    #[test]
    fn rle_round_trip_and_validation() {
        let m = Mask::from_rle(2, 3, &[0, 2, 1, 3]).unwrap();
        assert_eq!(m.bits(), &[true, true, false, true, true, true]);
        assert_eq!(m.to_rle(), vec![0, 2, 1, 3]);
        assert!(Mask::from_rle(2, 3, &[1, 2]).is_err());
    }

    #[test]
    fn majority_downsampling() {
        assert_eq!(Mask::full(7, 9).downsample_majority(3, 4).unwrap(), Mask::full(3, 4));
        // 4x4 -> 2x2; top-left block has 3 of 4 set, top-right exactly half.
        let m = Mask::from_bits(
            4,
            4,
            [
                1, 1, 1, 0, //
                1, 0, 0, 1, //
                0, 0, 0, 0, //
                0, 0, 0, 0,
            ]
            .iter()
            .map(|&b| b == 1)
            .collect(),
        )
        .unwrap();
        let small = m.downsample_majority(2, 2).unwrap();
        assert_eq!(small.bits(), &[true, false, false, false]);
    }

    #[test]
    fn quadrants_partition_odd_and_even_grids() {
        for (h, w) in [(7, 7), (7, 8), (8, 7), (8, 8), (1, 1)] {
            let mut cover = vec![0u8; h * w];
            for q in Quadrant::ALL {
                for (c, &b) in cover.iter_mut().zip(q.mask(h, w).bits()) {
                    *c += u8::from(b);
                }
            }
            assert!(cover.iter().all(|&c| c == 1), "{h}x{w}");
        }
        let tl = Quadrant::TopLeft.mask(7, 7);
        assert_eq!(tl.count(), 9);
        assert!(!tl.get(3, 0));
    }

    #[test]
    fn quadrant_names_parse() {
        for q in Quadrant::ALL {
            assert_eq!(q.name().parse::<Quadrant>().unwrap(), q);
        }
        assert_eq!("Bottom_Right".parse::<Quadrant>().unwrap(), Quadrant::BottomRight);
        assert!("middle".parse::<Quadrant>().is_err());
    }
}
