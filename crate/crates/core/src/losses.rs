//! Training losses: BCE, Dice, L1, GIoU primitives and their composition
//! into the pixel, region, and fine-grained objectives.
//!
//! Composition: `l_fgl = l_cgl + l_pixel` when a mask target exists,
//! `l_cgl + l_region` when a box target exists, `l_cgl` otherwise, with
//! `l_pixel = alpha1*bce + alpha2*dice` and
//! `l_region = beta1*l1 + beta2*giou`. Samples carrying both target kinds
//! add both branch terms (an extension, toggleable via
//! [`LossConfig::add_both_branches`]).

use crate::graph::{Graph, Var};
use crate::heads::{BoxVars, NormalizedBox};
use crate::mask::{BinaryMask, MaskError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dice_epsilon: f64,
    /// When a sample has both a mask and a box target, add both branch
    /// losses instead of letting the mask branch win.
    pub add_both_branches: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha1: 2.0,
            alpha2: 0.5,
            beta1: 1.0,
            beta2: 1.0,
            dice_epsilon: 1e-6,
            add_both_branches: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> bool {
        self.alpha1 >= 0.0
            && self.alpha2 >= 0.0
            && self.beta1 >= 0.0
            && self.beta2 >= 0.0
            && self.dice_epsilon > 0.0
    }
}

/// Per-sample record of every loss component; absent branches stay `None`.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub l_cgl: f64,
    pub l_bce: Option<f64>,
    pub l_dice: Option<f64>,
    pub l_l1: Option<f64>,
    pub l_giou: Option<f64>,
    pub l_pixel: Option<f64>,
    pub l_region: Option<f64>,
    pub l_fgl: f64,
}

/// Guards divisions in IoU-style ratios against doubly-degenerate boxes.
const BOX_EPS: f64 = 1e-12;

// ---- graph-level primitives (training path) ----

pub fn bce_loss_var(g: &mut Graph, logits: Var, target: &BinaryMask) -> Var {
    g.bce_with_logits_mean(logits, target.pixels().to_vec())
}

pub fn dice_loss_var(g: &mut Graph, logits: Var, target: &BinaryMask, eps: f64) -> Var {
    let p = g.sigmoid(logits);
    let weights: alloc::vec::Vec<f64> = target
        .pixels()
        .iter()
        .map(|&t| if t { 1.0 } else { 0.0 })
        .collect();
    let sum_t: f64 = weights.iter().sum();
    let inter = g.weighted_sum(p, weights);
    let sum_p = g.sum_all(p);
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let den = g.add_scalar(sum_p, sum_t + eps);
    let ratio = g.div(num, den);
    let one = g.scalar(1.0);
    g.sub(one, ratio)
}

/// Mean absolute difference over the four coordinates.
pub fn l1_box_loss_var(g: &mut Graph, pred: &BoxVars, target: &BoxVars) -> Var {
    let pairs = [
        (pred.x1, target.x1),
        (pred.y1, target.y1),
        (pred.x2, target.x2),
        (pred.y2, target.y2),
    ];
    let mut acc: Option<Var> = None;
    for (p, t) in pairs {
        let d = g.sub(p, t);
        let d = g.abs(d);
        acc = Some(match acc {
            None => d,
            Some(a) => g.add(a, d),
        });
    }
    g.mul_scalar(acc.unwrap(), 0.25)
}

/// `1 - GIoU` where `GIoU = IoU - (|C| - |union|)/|C|`, C the smallest
/// enclosing box; in [0, 2] for valid boxes.
pub fn giou_loss_var(g: &mut Graph, pred: &BoxVars, target: &BoxVars) -> Var {
    let ix1 = g.max_elem(pred.x1, target.x1);
    let ix2 = g.min_elem(pred.x2, target.x2);
    let iy1 = g.max_elem(pred.y1, target.y1);
    let iy2 = g.min_elem(pred.y2, target.y2);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);

    let pw = g.sub(pred.x2, pred.x1);
    let ph = g.sub(pred.y2, pred.y1);
    let area_p = g.mul(pw, ph);
    let tw = g.sub(target.x2, target.x1);
    let th = g.sub(target.y2, target.y1);
    let area_t = g.mul(tw, th);

    let sum_areas = g.add(area_p, area_t);
    let union = g.sub(sum_areas, inter);

    let union_safe = g.add_scalar(union, BOX_EPS);
    let iou = g.div(inter, union_safe);

    let cx1 = g.min_elem(pred.x1, target.x1);
    let cx2 = g.max_elem(pred.x2, target.x2);
    let cy1 = g.min_elem(pred.y1, target.y1);
    let cy2 = g.max_elem(pred.y2, target.y2);
    let cw = g.sub(cx2, cx1);
    let ch = g.sub(cy2, cy1);
    let c_area = g.mul(cw, ch);

    let slack = g.sub(c_area, union);
    let c_safe = g.add_scalar(c_area, BOX_EPS);
    let penalty = g.div(slack, c_safe);

    let giou = g.sub(iou, penalty);
    let one = g.scalar(1.0);
    g.sub(one, giou)
}

/// Wraps a concrete box as constant graph vars.
pub fn box_vars_const(g: &mut Graph, b: &NormalizedBox) -> BoxVars {
    BoxVars {
        x1: g.scalar(b.x1),
        y1: g.scalar(b.y1),
        x2: g.scalar(b.x2),
        y2: g.scalar(b.y2),
    }
}

// ---- forward-only wrappers (the operation API) ----

fn check_shape(logits: &Tensor, target: &BinaryMask) -> Result<(), MaskError> {
    if logits.rows != target.height || logits.cols != target.width {
        return Err(MaskError::ShapeMismatch);
    }
    Ok(())
}

pub fn bce_loss(logits: &Tensor, target: &BinaryMask) -> Result<f64, MaskError> {
    check_shape(logits, target)?;
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let v = bce_loss_var(&mut g, l, target);
    Ok(g.item(v))
}

pub fn dice_loss(logits: &Tensor, target: &BinaryMask, eps: f64) -> Result<f64, MaskError> {
    check_shape(logits, target)?;
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let v = dice_loss_var(&mut g, l, target, eps);
    Ok(g.item(v))
}

pub fn l1_box_loss(pred: &NormalizedBox, target: &NormalizedBox) -> f64 {
    let mut g = Graph::new();
    let p = box_vars_const(&mut g, pred);
    let t = box_vars_const(&mut g, target);
    let v = l1_box_loss_var(&mut g, &p, &t);
    g.item(v)
}

pub fn giou_loss(pred: &NormalizedBox, target: &NormalizedBox) -> f64 {
    let mut g = Graph::new();
    let p = box_vars_const(&mut g, pred);
    let t = box_vars_const(&mut g, target);
    let v = giou_loss_var(&mut g, &p, &t);
    g.item(v)
}

/// Composes the fine-grained loss for one sample from its coarse-grained
/// loss and whichever prediction/target pairs exist.
pub fn fine_grained_loss(
    l_cgl: f64,
    mask_pair: Option<(&Tensor, &BinaryMask)>,
    box_pair: Option<(&NormalizedBox, &NormalizedBox)>,
    cfg: &LossConfig,
) -> Result<LossBreakdown, MaskError> {
    let mut out = LossBreakdown {
        l_cgl,
        l_fgl: l_cgl,
        ..LossBreakdown::default()
    };
    let use_mask = mask_pair.is_some();
    let use_box = box_pair.is_some() && (!use_mask || cfg.add_both_branches);

    if let Some((logits, target)) = mask_pair {
        let bce = bce_loss(logits, target)?;
        let dice = dice_loss(logits, target, cfg.dice_epsilon)?;
        let pixel = cfg.alpha1 * bce + cfg.alpha2 * dice;
        out.l_bce = Some(bce);
        out.l_dice = Some(dice);
        out.l_pixel = Some(pixel);
        out.l_fgl += pixel;
    }
    if use_box {
        let (pred, target) = box_pair.unwrap();
        let l1 = l1_box_loss(pred, target);
        let giou = giou_loss(pred, target);
        let region = cfg.beta1 * l1 + cfg.beta2 * giou;
        out.l_l1 = Some(l1);
        out.l_giou = Some(giou);
        out.l_region = Some(region);
        out.l_fgl += region;
    }
    Ok(out)
}
