//! Evaluation metrics: cumulative IoU over pixel masks, Precision@X over
//! boxes, and the inference-time fusion of region and mask outputs into a
//! final regression box.
//!
//! Accumulators are plain mergeable values with integer pixel counts, so
//! sharded evaluation merges to exactly the sequential result.

use crate::heads::NormalizedBox;
use crate::mask::{mask_to_bbox, BinaryMask, MaskError};

/// Dataset-level cumulative IoU: total intersection pixels over total
/// union pixels. Not the mean of per-sample IoUs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CIoUAccumulator {
    pub total_intersection: u64,
    pub total_union: u64,
}

impl CIoUAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &BinaryMask, target: &BinaryMask) -> Result<(), MaskError> {
        if pred.height != target.height || pred.width != target.width {
            return Err(MaskError::ShapeMismatch);
        }
        for (p, t) in pred.pixels().iter().zip(target.pixels()) {
            self.total_intersection += (*p && *t) as u64;
            self.total_union += (*p || *t) as u64;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CIoUAccumulator) {
        self.total_intersection += other.total_intersection;
        self.total_union += other.total_union;
    }

    /// 0/0 (no predicted and no target pixels anywhere) counts as perfect
    /// agreement.
    pub fn finalize(&self) -> f64 {
        if self.total_union == 0 {
            1.0
        } else {
            self.total_intersection as f64 / self.total_union as f64
        }
    }
}

/// Precision@X: fraction of samples whose box IoU is strictly above the
/// threshold, reported as a percentage.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PrecAccumulator {
    pub threshold: f64,
    pub hits: u64,
    pub total: u64,
}

impl Default for PrecAccumulator {
    fn default() -> Self {
        PrecAccumulator {
            threshold: 0.5,
            hits: 0,
            total: 0,
        }
    }
}

impl PrecAccumulator {
    pub fn new(threshold: f64) -> Self {
        PrecAccumulator {
            threshold,
            hits: 0,
            total: 0,
        }
    }

    pub fn accumulate(&mut self, pred: &NormalizedBox, target: &NormalizedBox) {
        self.total += 1;
        if box_iou(pred, target) > self.threshold {
            self.hits += 1;
        }
    }

    pub fn merge(&mut self, other: &PrecAccumulator) {
        assert_eq!(
            self.threshold.to_bits(),
            other.threshold.to_bits(),
            "merging accumulators with different thresholds"
        );
        self.hits += other.hits;
        self.total += other.total;
    }

    /// Percentage in [0, 100].
    pub fn finalize(&self) -> f64 {
        assert!(self.total > 0, "finalize on empty accumulator");
        100.0 * self.hits as f64 / self.total as f64
    }
}

/// Standard box intersection-over-union; 0 for disjoint boxes.
pub fn box_iou(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        // two degenerate (zero-area) boxes: identical -> 1, else 0
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Per-sample mask IoU (used by overfit checks; dataset metrics use
/// [`CIoUAccumulator`]).
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let mut acc = CIoUAccumulator::new();
    acc.accumulate(a, b)?;
    Ok(acc.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FuseError {
    /// Neither a location box nor a mask was produced.
    NoEvidence,
    Mask(MaskError),
}

impl core::fmt::Display for FuseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FuseError::NoEvidence => write!(f, "no box or mask to fuse"),
            FuseError::Mask(e) => write!(f, "mask error during fusion: {e}"),
        }
    }
}

/// Combines the region decoder's box and the generated mask into the
/// final regression box.
///
/// Single evidence passes through (the mask via its tight bbox). With
/// both: if the two boxes agree (IoU >= 0.5) return their coordinate-wise
/// mean, otherwise prefer the mask-derived box.
pub fn fuse_rec_outputs(
    loc_box: Option<&NormalizedBox>,
    mask: Option<&BinaryMask>,
) -> Result<NormalizedBox, FuseError> {
    let mask_box = match mask {
        Some(m) => Some(mask_to_bbox(m).map_err(FuseError::Mask)?),
        None => None,
    };
    match (loc_box, mask_box) {
        (None, None) => Err(FuseError::NoEvidence),
        (Some(b), None) => Ok(*b),
        (None, Some(mb)) => Ok(mb),
        (Some(b), Some(mb)) => {
            if box_iou(b, &mb) >= 0.5 {
                Ok(NormalizedBox::new(
                    (b.x1 + mb.x1) / 2.0,
                    (b.y1 + mb.y1) / 2.0,
                    (b.x2 + mb.x2) / 2.0,
                    (b.y2 + mb.y2) / 2.0,
                ))
            } else {
                Ok(mb)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn mask_with(h: usize, w: usize, pred: impl FnMut(usize, usize) -> bool) -> BinaryMask {
        BinaryMask::from_fn(h, w, pred)
    }

    #[test]
    fn ciou_is_not_mean_iou() {
        // sample 1: inter 10, union 20 (IoU 0.5); sample 2: inter 30, union 40 (IoU 0.75)
        let p1 = mask_with(1, 30, |_, c| c < 15);
        let t1 = mask_with(1, 30, |_, c| (5..20).contains(&c));
        let p2 = mask_with(1, 45, |_, c| c < 35);
        let t2 = mask_with(1, 45, |_, c| (5..40).contains(&c));
        let mut acc = CIoUAccumulator::new();
        acc.accumulate(&p1, &t1).unwrap();
        acc.accumulate(&p2, &t2).unwrap();
        assert_eq!(acc.total_intersection, 40);
        assert_eq!(acc.total_union, 60);
        let ciou = acc.finalize();
        assert!((ciou - 40.0 / 60.0).abs() < 1e-12);
        assert!((ciou - 0.625).abs() > 1e-3); // mean of 0.5 and 0.75 would be 0.625
    }

    #[test]
    fn ciou_perfect_and_disjoint() {
        let t = mask_with(6, 6, |r, c| r + c < 5);
        let mut acc = CIoUAccumulator::new();
        acc.accumulate(&t, &t).unwrap();
        assert_eq!(acc.finalize(), 1.0);

        let mut acc = CIoUAccumulator::new();
        let p = mask_with(6, 6, |r, c| r + c >= 5);
        acc.accumulate(&p, &t).unwrap();
        assert_eq!(acc.finalize(), 0.0);
    }

    #[test]
    fn ciou_empty_everything_counts_as_one() {
        let acc = CIoUAccumulator::new();
        assert_eq!(acc.finalize(), 1.0);
    }

    #[test]
    fn ciou_matches_brute_force_oracle() {
        let mut rng = SeededRng::new(13);
        let mut acc = CIoUAccumulator::new();
        let mut brute_inter = 0u64;
        let mut brute_union = 0u64;
        for _ in 0..200 {
            let p = mask_with(8, 8, |_, _| rng.uniform() < 0.4);
            let t = mask_with(8, 8, |_, _| rng.uniform() < 0.4);
            acc.accumulate(&p, &t).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    brute_inter += (p.get(r, c) && t.get(r, c)) as u64;
                    brute_union += (p.get(r, c) || t.get(r, c)) as u64;
                }
            }
        }
        assert_eq!(acc.total_intersection, brute_inter);
        assert_eq!(acc.total_union, brute_union);
    }

    #[test]
    fn ciou_shape_mismatch() {
        let mut acc = CIoUAccumulator::new();
        let a = BinaryMask::new(4, 4);
        let b = BinaryMask::new(4, 5);
        assert_eq!(acc.accumulate(&a, &b), Err(MaskError::ShapeMismatch));
    }

    #[test]
    fn merge_is_associative_and_commutative() {
        let parts = [(3u64, 9u64), (5, 11), (0, 2), (7, 7)];
        let make = |(i, u): (u64, u64)| CIoUAccumulator {
            total_intersection: i,
            total_union: u,
        };
        let mut left = make(parts[0]);
        for &p in &parts[1..] {
            left.merge(&make(p));
        }
        let mut right = make(parts[3]);
        for &p in parts[..3].iter().rev() {
            right.merge(&make(p));
        }
        assert_eq!(left, right);
    }

    #[test]
    fn box_iou_examples() {
        let unit = NormalizedBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(box_iou(&unit, &unit), 1.0);

        let half = NormalizedBox::new(0.5, 0.0, 1.0, 1.0);
        assert!((box_iou(&unit, &half) - 0.5).abs() < 1e-12);

        let a = NormalizedBox::new(0.0, 0.0, 0.2, 0.2);
        let b = NormalizedBox::new(0.8, 0.8, 1.0, 1.0);
        assert_eq!(box_iou(&a, &b), 0.0);
    }

    #[test]
    fn box_iou_is_symmetric_and_bounded() {
        let mut rng = SeededRng::new(5);
        for _ in 0..300 {
            let rand_box = |rng: &mut SeededRng| {
                let x1 = rng.uniform();
                let x2 = rng.uniform_range(x1, 1.0);
                let y1 = rng.uniform();
                let y2 = rng.uniform_range(y1, 1.0);
                NormalizedBox::new(x1, y1, x2, y2)
            };
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let ab = box_iou(&a, &b);
            assert_eq!(ab.to_bits(), box_iou(&b, &a).to_bits());
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn prec_tie_is_not_a_hit() {
        let mut acc = PrecAccumulator::new(0.5);
        // IoU exactly 0.5
        let unit = NormalizedBox::new(0.0, 0.0, 1.0, 1.0);
        let half = NormalizedBox::new(0.5, 0.0, 1.0, 1.0);
        acc.accumulate(&half, &unit);
        assert_eq!(acc.hits, 0);
        assert_eq!(acc.finalize(), 0.0);
    }

    #[test]
    fn prec_percentage_examples() {
        let unit = NormalizedBox::new(0.0, 0.0, 1.0, 1.0);
        let mut acc = PrecAccumulator::new(0.5);
        for _ in 0..4 {
            acc.accumulate(&unit, &unit);
        }
        assert_eq!(acc.finalize(), 100.0);

        let mut acc = PrecAccumulator::new(0.5);
        let miss = NormalizedBox::new(0.9, 0.9, 1.0, 1.0);
        for _ in 0..3 {
            acc.accumulate(&unit, &unit);
        }
        acc.accumulate(&miss, &unit);
        assert_eq!(acc.finalize(), 75.0);
    }

    #[test]
    fn fusion_single_inputs_pass_through() {
        let b = NormalizedBox::new(0.1, 0.1, 0.5, 0.6);
        assert_eq!(fuse_rec_outputs(Some(&b), None).unwrap(), b);

        let m = mask_with(8, 8, |r, c| (2..5).contains(&r) && (3..6).contains(&c));
        let fused = fuse_rec_outputs(None, Some(&m)).unwrap();
        assert_eq!(fused, mask_to_bbox(&m).unwrap());
    }

    #[test]
    fn fusion_fixed_point_when_boxes_agree() {
        let m = mask_with(8, 8, |r, c| (2..6).contains(&r) && (2..6).contains(&c));
        let mb = mask_to_bbox(&m).unwrap();
        let fused = fuse_rec_outputs(Some(&mb), Some(&m)).unwrap();
        assert_eq!(fused, mb);
    }

    #[test]
    fn fusion_prefers_mask_on_disagreement() {
        let m = mask_with(8, 8, |r, c| r < 2 && c < 2);
        let far = NormalizedBox::new(0.8, 0.8, 1.0, 1.0);
        let fused = fuse_rec_outputs(Some(&far), Some(&m)).unwrap();
        assert_eq!(fused, mask_to_bbox(&m).unwrap());
    }

    #[test]
    fn fusion_with_nothing_is_an_error() {
        assert_eq!(fuse_rec_outputs(None, None), Err(FuseError::NoEvidence));
    }
}
