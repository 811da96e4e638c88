//! Binary masks, the column-major RLE codec, and mask-to-box conversion.

use alloc::vec;
use alloc::vec::Vec;

use crate::heads::NormalizedBox;

/// Dense H x W boolean mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn pixels(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Thresholded probabilities -> mask (p > 0.5).
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), height * width);
        let mut m = Self::new(height, width);
        for (i, &z) in logits.iter().enumerate() {
            m.data[i] = z > 0.0; // sigmoid(z) > 0.5  <=>  z > 0
        }
        m
    }
}

/// Column-major run-length encoding, starting with the run of zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskError {
    /// RLE counts do not sum to height * width.
    MalformedRle { sum: usize, expected: usize },
    /// mask_to_bbox on a mask with no true pixel.
    EmptyMask,
    ShapeMismatch,
}

impl core::fmt::Display for MaskError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MaskError::MalformedRle { sum, expected } => {
                write!(f, "rle counts sum to {sum}, expected {expected}")
            }
            MaskError::EmptyMask => write!(f, "mask has no true pixels"),
            MaskError::ShapeMismatch => write!(f, "mask shapes differ"),
        }
    }
}

/// Encodes column-major: pixel order is (r=0..H) within (c=0..W).
pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run: u32 = 0;
    for c in 0..mask.width {
        for r in 0..mask.height {
            let v = mask.get(r, c);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    if mask.len() == 0 {
        counts.clear();
        counts.push(0);
    }
    RleMask {
        height: mask.height,
        width: mask.width,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    let expected = rle.height * rle.width;
    let sum: usize = rle.counts.iter().map(|&c| c as usize).sum();
    if sum != expected {
        return Err(MaskError::MalformedRle { sum, expected });
    }
    let mut mask = BinaryMask::new(rle.height, rle.width);
    let mut idx = 0usize;
    let mut value = false;
    for &count in &rle.counts {
        for _ in 0..count {
            let c = idx / rle.height;
            let r = idx % rle.height;
            if value {
                mask.set(r, c, true);
            }
            idx += 1;
        }
        value = !value;
    }
    Ok(mask)
}

/// Tight axis-aligned box over true pixels under the pixel-as-cell
/// convention: pixel (r, c) spans [c/W,(c+1)/W] x [r/H,(r+1)/H], so a
/// full mask maps to (0,0,1,1) exactly.
pub fn mask_to_bbox(mask: &BinaryMask) -> Result<NormalizedBox, MaskError> {
    let mut r_min = usize::MAX;
    let mut r_max = 0usize;
    let mut c_min = usize::MAX;
    let mut c_max = 0usize;
    let mut any = false;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                any = true;
                r_min = r_min.min(r);
                r_max = r_max.max(r);
                c_min = c_min.min(c);
                c_max = c_max.max(c);
            }
        }
    }
    if !any {
        return Err(MaskError::EmptyMask);
    }
    let w = mask.width as f64;
    let h = mask.height as f64;
    Ok(NormalizedBox::new(
        c_min as f64 / w,
        r_min as f64 / h,
        (c_max + 1) as f64 / w,
        (r_max + 1) as f64 / h,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_mask(rng: &mut SeededRng, h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::new(h, w);
        for r in 0..h {
            for c in 0..w {
                m.set(r, c, rng.bool());
            }
        }
        m
    }

    #[test]
    fn all_zero_mask_encodes_to_single_run() {
        let m = BinaryMask::new(4, 4);
        assert_eq!(rle_encode(&m).counts, vec![16]);
    }

    #[test]
    fn all_one_mask_starts_with_zero_run() {
        let m = BinaryMask::from_fn(4, 4, |_, _| true);
        assert_eq!(rle_encode(&m).counts, vec![0, 16]);
    }

    #[test]
    fn rle_is_column_major() {
        // single true pixel at (r=0, c=1): column-major flat index = 1*H + 0 = 4
        let mut m = BinaryMask::new(4, 4);
        m.set(0, 1, true);
        assert_eq!(rle_encode(&m).counts, vec![4, 1, 11]);
    }

    #[test]
    fn round_trip_random_masks() {
        let mut rng = SeededRng::new(99);
        for _ in 0..1000 {
            let m = random_mask(&mut rng, 8, 8);
            let back = rle_decode(&rle_encode(&m)).unwrap();
            assert_eq!(m, back);
        }
    }

    #[test]
    fn malformed_counts_are_rejected() {
        let rle = RleMask { height: 4, width: 4, counts: vec![10] };
        assert!(matches!(
            rle_decode(&rle),
            Err(MaskError::MalformedRle { sum: 10, expected: 16 })
        ));
    }

    #[test]
    fn full_mask_bbox_is_unit_box() {
        let m = BinaryMask::from_fn(6, 9, |_, _| true);
        let b = mask_to_bbox(&m).unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn single_pixel_bbox_matches_cell() {
        let mut m = BinaryMask::new(8, 8);
        m.set(2, 3, true);
        let b = mask_to_bbox(&m).unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (3.0 / 8.0, 2.0 / 8.0, 4.0 / 8.0, 3.0 / 8.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = BinaryMask::new(4, 4);
        assert_eq!(mask_to_bbox(&m), Err(MaskError::EmptyMask));
    }

    /// Brute-force oracle: bbox must contain every true pixel and no
    /// strictly tighter valid box exists.
    #[test]
    fn bbox_matches_exhaustive_scan_oracle() {
        let mut rng = SeededRng::new(7);
        for _ in 0..1000 {
            let mut m = random_mask(&mut rng, 8, 8);
            m.set(rng.index(8), rng.index(8), true); // guarantee nonempty
            let b = mask_to_bbox(&m).unwrap();

            let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
            for r in 0..8 {
                for c in 0..8 {
                    if m.get(r, c) {
                        r0 = r0.min(r);
                        r1 = r1.max(r);
                        c0 = c0.min(c);
                        c1 = c1.max(c);
                    }
                }
            }
            assert_eq!(b.x1, c0 as f64 / 8.0);
            assert_eq!(b.y1, r0 as f64 / 8.0);
            assert_eq!(b.x2, (c1 + 1) as f64 / 8.0);
            assert_eq!(b.y2, (r1 + 1) as f64 / 8.0);
        }
    }

    #[test]
    fn from_logits_thresholds_at_half() {
        let m = BinaryMask::from_logits(1, 3, &[-0.1, 0.0, 0.1]);
        assert!(!m.get(0, 0));
        assert!(!m.get(0, 1));
        assert!(m.get(0, 2));
    }
}
