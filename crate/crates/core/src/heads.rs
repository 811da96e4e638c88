//! Task-specific heads: the pixel path (projector plus a toy promptable
//! mask decoder) and the region path (projector plus an MLP location
//! decoder emitting a normalized box).
//!
//! Layer widths follow the reference ratios: both projectors are
//! `[d_lm -> d_lm, d_lm -> d_head]`, the location decoder is
//! `[d_box -> d_box, d_box -> d_box/2, d_box/2 -> 4]`.

use alloc::vec::Vec;

use crate::encoders::ImageFeature;
use crate::graph::{Graph, Var};
use crate::params::{init_xavier, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Axis-aligned box in unit-normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormalizedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormalizedBox {
    /// Panics unless 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let b = NormalizedBox { x1, y1, x2, y2 };
        assert!(b.is_valid(), "invalid box ({x1},{y1},{x2},{y2})");
        b
    }

    pub fn is_valid(&self) -> bool {
        0.0 <= self.x1
            && self.x1 <= self.x2
            && self.x2 <= 1.0
            && 0.0 <= self.y1
            && self.y1 <= self.y2
            && self.y2 <= 1.0
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadError {
    DimMismatch { what: &'static str, expected: usize, got: usize },
}

impl core::fmt::Display for HeadError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HeadError::DimMismatch { what, expected, got } => {
                write!(f, "{what}: expected {expected}, got {got}")
            }
        }
    }
}

// Parameter names, grouped per head so stages can freeze whole namespaces.
pub const PIXEL_SCOPE: &str = "pixel.";
pub const REGION_SCOPE: &str = "region.";

pub fn init_pixel_head(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    d_lm: usize,
    d_vis: usize,
    d_prompt: usize,
    patch_area: usize,
) {
    store.insert("pixel.proj.w1", init_xavier(rng, d_lm, d_lm));
    store.insert("pixel.proj.b1", Tensor::zeros(1, d_lm));
    store.insert("pixel.proj.w2", init_xavier(rng, d_lm, d_prompt));
    store.insert("pixel.proj.b2", Tensor::zeros(1, d_prompt));
    store.insert("pixel.dec.feat_w", init_xavier(rng, d_vis, d_prompt));
    store.insert("pixel.dec.prompt_w", init_xavier(rng, d_prompt, d_prompt));
    store.insert("pixel.dec.b0", Tensor::zeros(1, d_prompt));
    store.insert("pixel.dec.conv_w", init_xavier(rng, 9 * d_prompt, d_prompt));
    store.insert("pixel.dec.conv_b", Tensor::zeros(1, d_prompt));
    store.insert("pixel.dec.out_w", init_xavier(rng, d_prompt, patch_area));
    store.insert("pixel.dec.out_b", Tensor::zeros(1, patch_area));
}

pub fn init_region_head(store: &mut ParamStore, rng: &mut SeededRng, d_lm: usize, d_box: usize) {
    let d_half = d_box / 2;
    store.insert("region.proj.w1", init_xavier(rng, d_lm, d_lm));
    store.insert("region.proj.b1", Tensor::zeros(1, d_lm));
    store.insert("region.proj.w2", init_xavier(rng, d_lm, d_box));
    store.insert("region.proj.b2", Tensor::zeros(1, d_box));
    store.insert("region.dec.w1", init_xavier(rng, d_box, d_box));
    store.insert("region.dec.b1", Tensor::zeros(1, d_box));
    store.insert("region.dec.w2", init_xavier(rng, d_box, d_half));
    store.insert("region.dec.b2", Tensor::zeros(1, d_half));
    store.insert("region.dec.w3", init_xavier(rng, d_half, 4));
    store.insert("region.dec.b3", Tensor::zeros(1, 4));
}

/// Graph-bound pixel head parameters.
pub struct PixelHeadVars {
    proj_w1: Var,
    proj_b1: Var,
    proj_w2: Var,
    proj_b2: Var,
    feat_w: Var,
    prompt_w: Var,
    b0: Var,
    conv_w: Var,
    conv_b: Var,
    out_w: Var,
    out_b: Var,
}

impl PixelHeadVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, lease: &mut ParamLease) -> Self {
        PixelHeadVars {
            proj_w1: lease.var(g, store, "pixel.proj.w1"),
            proj_b1: lease.var(g, store, "pixel.proj.b1"),
            proj_w2: lease.var(g, store, "pixel.proj.w2"),
            proj_b2: lease.var(g, store, "pixel.proj.b2"),
            feat_w: lease.var(g, store, "pixel.dec.feat_w"),
            prompt_w: lease.var(g, store, "pixel.dec.prompt_w"),
            b0: lease.var(g, store, "pixel.dec.b0"),
            conv_w: lease.var(g, store, "pixel.dec.conv_w"),
            conv_b: lease.var(g, store, "pixel.dec.conv_b"),
            out_w: lease.var(g, store, "pixel.dec.out_w"),
            out_b: lease.var(g, store, "pixel.dec.out_b"),
        }
    }

    /// seg_state `[1 x d_lm]` + patch features `[n x d_vis]` -> mask
    /// logits `[H x W]` where H = grid.0 * patch, W = grid.1 * patch.
    ///
    /// The projected prompt modulates every patch embedding (addition
    /// after a linear map); a 3x3 conv mixes neighboring patches and a
    /// per-patch linear upsample emits pixel logits.
    pub fn mask_logits(
        &self,
        g: &mut Graph,
        seg_state: Var,
        features: Var,
        grid: (usize, usize),
        patch: usize,
    ) -> Var {
        let s = g.linear(seg_state, self.proj_w1, self.proj_b1);
        let s = g.tanh(s);
        let prompt = g.linear(s, self.proj_w2, self.proj_b2);

        let pf = g.matmul(features, self.feat_w);
        let pm = g.matmul(prompt, self.prompt_w);
        let shift = g.add(pm, self.b0);
        let h0 = g.add_row(pf, shift);
        let h0 = g.tanh(h0);

        let h1 = g.conv3x3(h0, self.conv_w, self.conv_b, grid);
        let h1 = g.tanh(h1);

        let patches = g.linear(h1, self.out_w, self.out_b);
        let (gr, gc) = grid;
        let (h, w) = (gr * patch, gc * patch);
        let perm = patch_to_image_perm(grid, patch);
        debug_assert_eq!(g.value(patches).len(), h * w);
        g.reindex(patches, perm, h, w)
    }
}

/// Graph-bound region head parameters.
pub struct RegionHeadVars {
    proj_w1: Var,
    proj_b1: Var,
    proj_w2: Var,
    proj_b2: Var,
    dec_w1: Var,
    dec_b1: Var,
    dec_w2: Var,
    dec_b2: Var,
    dec_w3: Var,
    dec_b3: Var,
}

/// Differentiable box: four scalar vars satisfying the box ordering by
/// construction (sigmoid then coordinate-wise min/max).
pub struct BoxVars {
    pub x1: Var,
    pub y1: Var,
    pub x2: Var,
    pub y2: Var,
}

impl BoxVars {
    pub fn to_box(&self, g: &Graph) -> NormalizedBox {
        NormalizedBox::new(g.item(self.x1), g.item(self.y1), g.item(self.x2), g.item(self.y2))
    }
}

impl RegionHeadVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, lease: &mut ParamLease) -> Self {
        RegionHeadVars {
            proj_w1: lease.var(g, store, "region.proj.w1"),
            proj_b1: lease.var(g, store, "region.proj.b1"),
            proj_w2: lease.var(g, store, "region.proj.w2"),
            proj_b2: lease.var(g, store, "region.proj.b2"),
            dec_w1: lease.var(g, store, "region.dec.w1"),
            dec_b1: lease.var(g, store, "region.dec.b1"),
            dec_w2: lease.var(g, store, "region.dec.w2"),
            dec_b2: lease.var(g, store, "region.dec.b2"),
            dec_w3: lease.var(g, store, "region.dec.w3"),
            dec_b3: lease.var(g, store, "region.dec.b3"),
        }
    }

    /// loc_state `[1 x d_lm]` -> raw 4-vector, pre-sigmoid.
    pub fn raw_box(&self, g: &mut Graph, loc_state: Var) -> Var {
        let s = g.linear(loc_state, self.proj_w1, self.proj_b1);
        let s = g.tanh(s);
        let z = g.linear(s, self.proj_w2, self.proj_b2);
        let h1 = g.linear(z, self.dec_w1, self.dec_b1);
        let h1 = g.tanh(h1);
        let h2 = g.linear(h1, self.dec_w2, self.dec_b2);
        let h2 = g.tanh(h2);
        g.linear(h2, self.dec_w3, self.dec_b3)
    }

    pub fn box_vars(&self, g: &mut Graph, loc_state: Var) -> BoxVars {
        let raw = self.raw_box(g, loc_state);
        box_vars_from_raw(g, raw)
    }
}

/// Squashes a raw `[1 x 4]` output into a valid box: sigmoid each
/// coordinate, then order the pairs so x1 <= x2 and y1 <= y2.
pub fn box_vars_from_raw(g: &mut Graph, raw: Var) -> BoxVars {
    assert_eq!(g.value(raw).len(), 4, "raw box must have 4 entries");
    let a = g.index_scalar(raw, 0);
    let b = g.index_scalar(raw, 1);
    let c = g.index_scalar(raw, 2);
    let d = g.index_scalar(raw, 3);
    let sa = g.sigmoid(a);
    let sb = g.sigmoid(b);
    let sc = g.sigmoid(c);
    let sd = g.sigmoid(d);
    BoxVars {
        x1: g.min_elem(sa, sc),
        y1: g.min_elem(sb, sd),
        x2: g.max_elem(sa, sc),
        y2: g.max_elem(sb, sd),
    }
}

/// Flat permutation mapping per-patch pixel blocks `[n_patches x patch^2]`
/// onto a row-major `[H x W]` image.
pub fn patch_to_image_perm(grid: (usize, usize), patch: usize) -> Vec<usize> {
    let (gr, gc) = grid;
    let (h, w) = (gr * patch, gc * patch);
    let mut perm = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = (y / patch) * gc + (x / patch);
            let o = (y % patch) * patch + (x % patch);
            perm.push(p * patch * patch + o);
        }
    }
    perm
}

/// Helper that leases `ParamStore` tensors into a graph exactly once and
/// remembers the var of each name so gradients can be read back out.
#[derive(Default)]
pub struct ParamLease {
    bound: alloc::collections::BTreeMap<alloc::string::String, Var>,
}

impl ParamLease {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = g.leaf(store.get(name).clone());
        self.bound.insert(name.into(), v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (&alloc::string::String, &Var)> {
        self.bound.iter()
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }
}

/// Forward-only mask prediction for a single extracted seg state.
pub fn predict_mask_logits(
    store: &ParamStore,
    seg_state: &[f64],
    feature: &ImageFeature,
    patch: usize,
) -> Result<Tensor, HeadError> {
    let d_lm = store.get("pixel.proj.w1").rows;
    if seg_state.len() != d_lm {
        return Err(HeadError::DimMismatch {
            what: "seg_state width",
            expected: d_lm,
            got: seg_state.len(),
        });
    }
    let d_vis = store.get("pixel.dec.feat_w").rows;
    if feature.patch_embeddings.cols != d_vis {
        return Err(HeadError::DimMismatch {
            what: "feature width",
            expected: d_vis,
            got: feature.patch_embeddings.cols,
        });
    }
    let mut g = Graph::new();
    let mut lease = ParamLease::new();
    let head = PixelHeadVars::bind(&mut g, store, &mut lease);
    let state = g.leaf(Tensor::from_vec(1, seg_state.len(), seg_state.to_vec()));
    let feat = g.leaf(feature.patch_embeddings.clone());
    let logits = head.mask_logits(&mut g, state, feat, feature.grid_shape, patch);
    Ok(g.value(logits).clone())
}

/// Forward-only box prediction for a single extracted loc state.
pub fn predict_box(store: &ParamStore, loc_state: &[f64]) -> Result<NormalizedBox, HeadError> {
    let d_lm = store.get("region.proj.w1").rows;
    if loc_state.len() != d_lm {
        return Err(HeadError::DimMismatch {
            what: "loc_state width",
            expected: d_lm,
            got: loc_state.len(),
        });
    }
    let mut g = Graph::new();
    let mut lease = ParamLease::new();
    let head = RegionHeadVars::bind(&mut g, store, &mut lease);
    let state = g.leaf(Tensor::from_vec(1, loc_state.len(), loc_state.to_vec()));
    let bv = head.box_vars(&mut g, state);
    Ok(bv.to_box(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ImageFeature;

    fn toy_store(d_lm: usize, d_vis: usize, d_prompt: usize, d_box: usize, patch: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(11);
        init_pixel_head(&mut store, &mut rng, d_lm, d_vis, d_prompt, patch * patch);
        init_region_head(&mut store, &mut rng, d_lm, d_box);
        store
    }

    fn toy_feature(n: usize, d_vis: usize, grid: (usize, usize), seed: u64) -> ImageFeature {
        let mut rng = SeededRng::new(seed);
        let mut t = Tensor::zeros(n, d_vis);
        for v in t.data.iter_mut() {
            *v = rng.normal();
        }
        ImageFeature { patch_embeddings: t, grid_shape: grid }
    }

    #[test]
    fn mask_logits_have_image_shape() {
        let store = toy_store(64, 32, 32, 32, 16);
        let feat = toy_feature(16, 32, (4, 4), 1);
        let state = vec![0.1; 64];
        let logits = predict_mask_logits(&store, &state, &feat, 16).unwrap();
        assert_eq!(logits.shape(), (64, 64));
    }

    #[test]
    fn different_seg_states_give_different_logits() {
        let store = toy_store(32, 16, 16, 16, 8);
        let feat = toy_feature(16, 16, (4, 4), 2);
        let mut rng = SeededRng::new(3);
        let s1: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let s2: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let l1 = predict_mask_logits(&store, &s1, &feat, 8).unwrap();
        let l2 = predict_mask_logits(&store, &s2, &feat, 8).unwrap();
        assert!(l1.data.iter().zip(&l2.data).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn zeroed_head_yields_constant_logit_map() {
        let mut store = toy_store(32, 16, 16, 16, 8);
        for name in store.names() {
            if name.starts_with(PIXEL_SCOPE) {
                let t = store.get_mut(&name);
                for v in t.data.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let feat = toy_feature(16, 16, (4, 4), 4);
        let logits = predict_mask_logits(&store, &[0.5; 32], &feat, 8).unwrap();
        let first = logits.data[0];
        assert!(logits.data.iter().all(|&v| v == first));
    }

    #[test]
    fn wrong_state_width_is_dim_mismatch() {
        let store = toy_store(32, 16, 16, 16, 8);
        let feat = toy_feature(16, 16, (4, 4), 5);
        assert!(matches!(
            predict_mask_logits(&store, &[0.0; 31], &feat, 8),
            Err(HeadError::DimMismatch { .. })
        ));
    }

    #[test]
    fn zero_raw_box_is_center_point() {
        let mut g = Graph::new();
        let raw = g.leaf(Tensor::from_vec(1, 4, vec![0.0; 4]));
        let bv = box_vars_from_raw(&mut g, raw);
        let b = bv.to_box(&g);
        assert_eq!(b.as_array(), [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn swapped_coords_reorder_to_same_box() {
        let mut g = Graph::new();
        let raw1 = g.leaf(Tensor::from_vec(1, 4, vec![-1.0, 0.3, 2.0, -0.7]));
        let raw2 = g.leaf(Tensor::from_vec(1, 4, vec![2.0, -0.7, -1.0, 0.3]));
        let b1 = box_vars_from_raw(&mut g, raw1).to_box(&g);
        let b2 = box_vars_from_raw(&mut g, raw2).to_box(&g);
        assert_eq!(b1, b2);
    }

    #[test]
    fn predicted_boxes_are_always_valid() {
        let store = toy_store(32, 16, 16, 16, 8);
        let mut rng = SeededRng::new(17);
        for _ in 0..200 {
            let state: Vec<f64> = (0..32).map(|_| rng.normal_scaled(3.0)).collect();
            let b = predict_box(&store, &state).unwrap();
            assert!(b.is_valid());
        }
    }

    #[test]
    fn layer_widths_follow_reference_ratios() {
        let store = toy_store(64, 32, 32, 32, 16);
        // projectors: [d_lm -> d_lm, d_lm -> d_head]
        assert_eq!(store.get("pixel.proj.w1").shape(), (64, 64));
        assert_eq!(store.get("pixel.proj.w2").shape(), (64, 32));
        assert_eq!(store.get("region.proj.w1").shape(), (64, 64));
        assert_eq!(store.get("region.proj.w2").shape(), (64, 32));
        // location decoder: [d_box -> d_box, d_box -> d_box/2, d_box/2 -> 4]
        assert_eq!(store.get("region.dec.w1").shape(), (32, 32));
        assert_eq!(store.get("region.dec.w2").shape(), (32, 16));
        assert_eq!(store.get("region.dec.w3").shape(), (16, 4));
    }

    #[test]
    fn patch_perm_is_a_bijection() {
        let perm = patch_to_image_perm((3, 2), 4);
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
