//! Binary masks and their run-length sidecar form.
//!
//! Runs are `(start, run)` pairs over the row-major pixel index
//! `y * width + x`. A canonical run list is sorted, has no zero-length runs
//! and no two runs touch; `SegmentMask::from_bitmask` always produces one.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::DatasetError;
use crate::geometry::PixelBox;

/// Dense row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|b| **b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Sets every pixel of `bbox` (clipped to the mask).
    pub fn fill_box(&mut self, bbox: PixelBox) {
        let x1 = bbox.x1.min(self.width);
        let y1 = bbox.y1.min(self.height);
        for y in bbox.y0.min(y1)..y1 {
            for x in bbox.x0.min(x1)..x1 {
                self.set(x, y, true);
            }
        }
    }

    /// Copy of this mask with everything outside `bbox` cleared.
    pub fn clipped_to(&self, bbox: PixelBox) -> BitMask {
        BitMask::from_fn(self.width, self.height, |x, y| {
            bbox.contains(x, y) && self.get(x, y)
        })
    }

    /// Extracts the `bbox` window as a mask in box-local coordinates.
    pub fn crop(&self, bbox: PixelBox) -> BitMask {
        BitMask::from_fn(bbox.width(), bbox.height(), |x, y| {
            self.get(bbox.x0 + x, bbox.y0 + y)
        })
    }

    /// Ors `local` into this mask with its origin at `(dx, dy)`.
    ///
    /// Fails if any part of `local` would land outside this mask.
    pub fn paste_or(&mut self, local: &BitMask, dx: u32, dy: u32) -> Result<(), DatasetError> {
        if dx + local.width > self.width || dy + local.height > self.height {
            return Err(DatasetError::DimensionMismatch {
                expected: (self.width, self.height),
                found: (dx + local.width, dy + local.height),
            });
        }
        for y in 0..local.height {
            for x in 0..local.width {
                if local.get(x, y) {
                    self.set(dx + x, dy + y, true);
                }
            }
        }
        Ok(())
    }

    pub fn union_with(&mut self, other: &BitMask) -> Result<(), DatasetError> {
        self.check_same_dims(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    /// Returns `(|a ∩ b|, |a ∪ b|)`.
    pub fn overlap_counts(&self, other: &BitMask) -> Result<(u64, u64), DatasetError> {
        self.check_same_dims(other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as u64;
            union += (*a || *b) as u64;
        }
        Ok((inter, union))
    }

    pub fn check_same_dims(&self, other: &BitMask) -> Result<(), DatasetError> {
        if self.dims() != other.dims() {
            return Err(DatasetError::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }
}

/// A binary mask for one part class of one image, stored as runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMask {
    pub image_id: String,
    pub class: String,
    pub width: u32,
    pub height: u32,
    pub rle: Vec<(u32, u32)>,
}

impl SegmentMask {
    pub fn empty(image_id: impl Into<String>, class: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            class: class.into(),
            width,
            height,
            rle: Vec::new(),
        }
    }

    pub fn from_bitmask(image_id: impl Into<String>, class: impl Into<String>, mask: &BitMask) -> Self {
        Self {
            image_id: image_id.into(),
            class: class.into(),
            width: mask.width,
            height: mask.height,
            rle: encode_runs(mask.as_slice()),
        }
    }

    /// Expands the runs into a dense mask.
    ///
    /// Touching runs are accepted; unsorted, overlapping, empty or
    /// out-of-bounds runs are errors.
    pub fn decode(&self) -> Result<BitMask, DatasetError> {
        let total = self.width as u64 * self.height as u64;
        let mut mask = BitMask::new(self.width, self.height);
        let mut prev_end = 0u64;
        for (i, &(start, run)) in self.rle.iter().enumerate() {
            let (start, run) = (start as u64, run as u64);
            if run == 0 {
                return Err(DatasetError::InvalidRle(format!("run {i} has zero length")));
            }
            if start < prev_end {
                return Err(DatasetError::InvalidRle(format!(
                    "run {i} starting at {start} overlaps or precedes the previous run ending at {prev_end}"
                )));
            }
            let end = start + run;
            if end > total {
                return Err(DatasetError::InvalidRle(format!(
                    "run {i} ends at {end}, beyond the {}x{} grid",
                    self.width, self.height
                )));
            }
            mask.bits[start as usize..end as usize].fill(true);
            prev_end = end;
        }
        Ok(mask)
    }

    pub fn is_canonical(&self) -> bool {
        let mut prev_end: Option<u64> = None;
        for &(start, run) in &self.rle {
            if run == 0 {
                return false;
            }
            if let Some(end) = prev_end {
                if (start as u64) <= end {
                    return false;
                }
            }
            prev_end = Some(start as u64 + run as u64);
        }
        prev_end.is_none_or(|end| end <= self.width as u64 * self.height as u64)
    }

    pub fn popcount(&self) -> u64 {
        self.rle.iter().map(|&(_, r)| r as u64).sum()
    }

    pub fn read_json(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::json(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string(self).map_err(|e| DatasetError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| DatasetError::io(path, e))
    }
}

fn encode_runs(bits: &[bool]) -> Vec<(u32, u32)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < bits.len() {
        if bits[i] {
            let start = i;
            while i < bits.len() && bits[i] {
                i += 1;
            }
            runs.push((start as u32, (i - start) as u32));
        } else {
            i += 1;
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_4x4(rle: Vec<(u32, u32)>) -> SegmentMask {
        SegmentMask { image_id: "a".into(), class: "wheel".into(), width: 4, height: 4, rle }
    }

    #[test]
    fn empty_rle_decodes_all_false() {
        let m = mask_4x4(vec![]).decode().unwrap();
        assert!(m.is_empty());
        assert_eq!(m.dims(), (4, 4));
    }

    #[test]
    fn single_run_is_first_row() {
        let m = mask_4x4(vec![(0, 4)]).decode().unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.get(x, y), y == 0);
            }
        }
    }

    #[test]
    fn out_of_bounds_and_overlap_rejected() {
        assert!(mask_4x4(vec![(14, 3)]).decode().is_err());
        assert!(mask_4x4(vec![(0, 4), (3, 2)]).decode().is_err());
        assert!(mask_4x4(vec![(5, 1), (2, 1)]).decode().is_err());
        assert!(mask_4x4(vec![(5, 0)]).decode().is_err());
    }

    #[test]
    fn touching_runs_decode_but_are_not_canonical() {
        let m = mask_4x4(vec![(0, 2), (2, 2)]);
        assert!(!m.is_canonical());
        let dense = m.decode().unwrap();
        assert_eq!(SegmentMask::from_bitmask("a", "wheel", &dense).rle, vec![(0, 4)]);
    }

    #[test]
    fn fill_and_crop_paste() {
        let mut m = BitMask::new(30, 30);
        m.fill_box(PixelBox::new(10, 10, 20, 20));
        assert_eq!(m.count(), 100);
        let local = m.crop(PixelBox::new(5, 5, 25, 25));
        assert_eq!(local.count(), 100);
        let mut back = BitMask::new(30, 30);
        back.paste_or(&local, 5, 5).unwrap();
        assert_eq!(back, m);
        assert!(back.paste_or(&local, 15, 0).is_err());
    }

    // Oracle: the grid is reconstructed by a direct pixel loop over the runs,
    // independent of `decode`.
    fn pixel_loop(width: u32, height: u32, rle: &[(u32, u32)]) -> Vec<bool> {
        let mut out = Vec::new();
        for p in 0..width * height {
            out.push(rle.iter().any(|&(s, r)| p >= s && p < s + r));
        }
        out
    }

    #[test]
    fn random_8x8_round_trip_against_pixel_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let dense = BitMask::from_fn(8, 8, |_, _| rng.random_bool(0.4));
            let seg = SegmentMask::from_bitmask("i", "c", &dense);
            assert!(seg.is_canonical());
            assert_eq!(pixel_loop(8, 8, &seg.rle), dense.as_slice());
            let decoded = seg.decode().unwrap();
            assert_eq!(decoded, dense);
            assert_eq!(decoded.count(), seg.popcount());
        }
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1u32..24, h in 1u32..24, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dense = BitMask::from_fn(w, h, |_, _| rng.random_bool(0.5));
            let seg = SegmentMask::from_bitmask("i", "c", &dense);
            let decoded = seg.decode().unwrap();
            prop_assert_eq!(&decoded, &dense);
            prop_assert_eq!(SegmentMask::from_bitmask("i", "c", &decoded).rle, seg.rle);
        }
    }
}
