//! Toy visual encoders and the alignment projector.
//!
//! The image encoder is a frozen random linear patch embedding (a
//! stand-in for a pretrained backbone: deterministic, never trained).
//! Videos get spatio-temporal features: per-patch spatial rows averaged
//! over frames plus one pooled row per frame, so a video contributes
//! `n_patches + T` rows, matching the video token span. The projector
//! maps encoder features into the LM embedding space and is the only
//! stage-I trainable component.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::heads::ParamLease;
use crate::params::{init_xavier, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Interleaved RGB image, row-major, 8-bit channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-patch spatial features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    /// `[n_patches x d_vis]`, row-major over the patch grid.
    pub patch_embeddings: Tensor,
    pub grid_shape: (usize, usize),
}

/// Spatio-temporal features for one video clip.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeature {
    /// `[n_patches x d_vis]`: temporal mean of per-frame patch features.
    pub spatial_embeddings: Tensor,
    /// `[T x d_vis]`: per-frame spatially pooled features.
    pub temporal_embeddings: Tensor,
    pub grid_shape: (usize, usize),
}

impl VideoFeature {
    /// Spatial rows then temporal rows: `n_patches + T` in total, the
    /// order the video patch tokens are filled in.
    pub fn concat_rows(&self) -> Tensor {
        let d = self.spatial_embeddings.cols;
        let n = self.spatial_embeddings.rows + self.temporal_embeddings.rows;
        let mut out = Tensor::zeros(n, d);
        for r in 0..self.spatial_embeddings.rows {
            out.row_mut(r).copy_from_slice(self.spatial_embeddings.row(r));
        }
        for t in 0..self.temporal_embeddings.rows {
            out.row_mut(self.spatial_embeddings.rows + t)
                .copy_from_slice(self.temporal_embeddings.row(t));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodeError {
    /// Image dimensions not divisible by the patch size, or wrong frame count.
    BadShape { what: &'static str, expected: usize, got: usize },
    DimMismatch { what: &'static str, expected: usize, got: usize },
}

impl core::fmt::Display for EncodeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EncodeError::BadShape { what, expected, got } => {
                write!(f, "bad shape for {what}: expected {expected}, got {got}")
            }
            EncodeError::DimMismatch { what, expected, got } => {
                write!(f, "dim mismatch for {what}: expected {expected}, got {got}")
            }
        }
    }
}

pub const ENCODER_SCOPE: &str = "encoder.";
pub const VIS_PROJ_SCOPE: &str = "vis_proj.";

/// Frozen linear patch embedding over `patch_size`-square RGB patches.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    pub patch_size: usize,
    pub d_vis: usize,
    weight: Tensor,
    bias: Tensor,
}

impl ToyImageEncoder {
    /// Creates the (frozen) encoder parameters in the store.
    pub fn init(store: &mut ParamStore, rng: &mut SeededRng, patch_size: usize, d_vis: usize) {
        let in_dim = patch_size * patch_size * 3;
        store.insert("encoder.patch_w", init_xavier(rng, in_dim, d_vis));
        store.insert("encoder.patch_b", Tensor::zeros(1, d_vis));
    }

    pub fn from_store(store: &ParamStore, patch_size: usize) -> Self {
        let weight = store.get("encoder.patch_w").clone();
        let d_vis = weight.cols;
        assert_eq!(weight.rows, patch_size * patch_size * 3, "encoder patch size mismatch");
        ToyImageEncoder {
            patch_size,
            d_vis,
            weight,
            bias: store.get("encoder.patch_b").clone(),
        }
    }

    /// Flattens each patch (pixels scaled to [-0.5, 0.5]) through the
    /// frozen linear map. Deterministic for fixed parameters.
    pub fn encode_image(&self, img: &RgbImage) -> Result<ImageFeature, EncodeError> {
        let p = self.patch_size;
        if img.height % p != 0 {
            return Err(EncodeError::BadShape {
                what: "image height",
                expected: (img.height / p) * p,
                got: img.height,
            });
        }
        if img.width % p != 0 {
            return Err(EncodeError::BadShape {
                what: "image width",
                expected: (img.width / p) * p,
                got: img.width,
            });
        }
        let grid = (img.height / p, img.width / p);
        let n = grid.0 * grid.1;
        let mut flat = Tensor::zeros(n, p * p * 3);
        for gr in 0..grid.0 {
            for gc in 0..grid.1 {
                let row = flat.row_mut(gr * grid.1 + gc);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let [r, g, b] = img.pixel(gr * p + dy, gc * p + dx);
                        row[k] = r as f64 / 255.0 - 0.5;
                        row[k + 1] = g as f64 / 255.0 - 0.5;
                        row[k + 2] = b as f64 / 255.0 - 0.5;
                        k += 3;
                    }
                }
            }
        }
        let emb = flat.matmul(&self.weight).add_row(&self.bias);
        Ok(ImageFeature {
            patch_embeddings: emb,
            grid_shape: grid,
        })
    }

    /// Per-frame patch features averaged over time (spatial rows) plus a
    /// spatial mean per frame (temporal rows).
    pub fn encode_video(
        &self,
        frames: &[RgbImage],
        expected_frames: usize,
    ) -> Result<VideoFeature, EncodeError> {
        if frames.len() != expected_frames {
            return Err(EncodeError::BadShape {
                what: "frame count",
                expected: expected_frames,
                got: frames.len(),
            });
        }
        assert!(!frames.is_empty(), "encode_video on zero frames");
        let first = self.encode_image(&frames[0])?;
        let grid = first.grid_shape;
        let n = first.patch_embeddings.rows;
        let d = self.d_vis;
        let mut spatial = Tensor::zeros(n, d);
        let mut temporal = Tensor::zeros(frames.len(), d);
        for (t, frame) in frames.iter().enumerate() {
            let feat = self.encode_image(frame)?;
            if feat.grid_shape != grid {
                return Err(EncodeError::BadShape {
                    what: "frame grid",
                    expected: n,
                    got: feat.patch_embeddings.rows,
                });
            }
            for r in 0..n {
                for c in 0..d {
                    spatial.data[r * d + c] += feat.patch_embeddings.get(r, c);
                    temporal.data[t * d + c] += feat.patch_embeddings.get(r, c) / n as f64;
                }
            }
        }
        let tf = frames.len() as f64;
        for v in spatial.data.iter_mut() {
            *v /= tf;
        }
        Ok(VideoFeature {
            spatial_embeddings: spatial,
            temporal_embeddings: temporal,
            grid_shape: grid,
        })
    }
}

/// Creates the stage-I trainable projector parameters. `depth` 1 is a
/// single linear map; 2 inserts a tanh hidden layer.
pub fn init_visual_projector(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    d_vis: usize,
    d_lm: usize,
    depth: usize,
) {
    match depth {
        1 => {
            store.insert("vis_proj.w0", init_xavier(rng, d_vis, d_lm));
            store.insert("vis_proj.b0", Tensor::zeros(1, d_lm));
        }
        2 => {
            store.insert("vis_proj.w0", init_xavier(rng, d_vis, d_lm));
            store.insert("vis_proj.b0", Tensor::zeros(1, d_lm));
            store.insert("vis_proj.w1", init_xavier(rng, d_lm, d_lm));
            store.insert("vis_proj.b1", Tensor::zeros(1, d_lm));
        }
        _ => panic!("projector depth must be 1 or 2"),
    }
}

/// Graph-bound projector.
pub struct VisualProjectorVars {
    w0: Var,
    b0: Var,
    hidden: Option<(Var, Var)>,
}

impl VisualProjectorVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, lease: &mut ParamLease) -> Self {
        let w0 = lease.var(g, store, "vis_proj.w0");
        let b0 = lease.var(g, store, "vis_proj.b0");
        let hidden = if store.contains("vis_proj.w1") {
            Some((
                lease.var(g, store, "vis_proj.w1"),
                lease.var(g, store, "vis_proj.b1"),
            ))
        } else {
            None
        };
        VisualProjectorVars { w0, b0, hidden }
    }

    /// `[k x d_vis]` feature rows -> `[k x d_lm]` embeddings.
    pub fn project(&self, g: &mut Graph, rows: Var) -> Var {
        let h = g.linear(rows, self.w0, self.b0);
        match self.hidden {
            None => h,
            Some((w1, b1)) => {
                let h = g.tanh(h);
                g.linear(h, w1, b1)
            }
        }
    }
}

/// Forward-only projection of feature rows into the LM embedding space.
pub fn project_visual_rows(store: &ParamStore, rows: &Tensor) -> Result<Tensor, EncodeError> {
    let d_vis = store.get("vis_proj.w0").rows;
    if rows.cols != d_vis {
        return Err(EncodeError::DimMismatch {
            what: "projector input",
            expected: d_vis,
            got: rows.cols,
        });
    }
    let mut g = Graph::new();
    let mut lease = ParamLease::new();
    let proj = VisualProjectorVars::bind(&mut g, store, &mut lease);
    let x = g.leaf(rows.clone());
    let y = proj.project(&mut g, x);
    Ok(g.value(y).clone())
}

pub fn project_image(store: &ParamStore, feat: &ImageFeature) -> Result<Tensor, EncodeError> {
    project_visual_rows(store, &feat.patch_embeddings)
}

pub fn project_video(store: &ParamStore, feat: &VideoFeature) -> Result<Tensor, EncodeError> {
    project_visual_rows(store, &feat.concat_rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_setup(patch: usize, d_vis: usize) -> (ParamStore, ToyImageEncoder) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(21);
        ToyImageEncoder::init(&mut store, &mut rng, patch, d_vis);
        init_visual_projector(&mut store, &mut rng, d_vis, 24, 1);
        let enc = ToyImageEncoder::from_store(&store, patch);
        (store, enc)
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = SeededRng::new(seed);
        let mut img = RgbImage::new(h, w);
        for v in img.data.iter_mut() {
            *v = (rng.next_u64() & 0xFF) as u8;
        }
        img
    }

    #[test]
    fn image_patch_grid_is_consistent() {
        let (_store, enc) = toy_setup(16, 8);
        let img = noise_image(64, 64, 1);
        let feat = enc.encode_image(&img).unwrap();
        assert_eq!(feat.grid_shape, (4, 4));
        assert_eq!(feat.patch_embeddings.rows, 16);
    }

    #[test]
    fn encoding_is_deterministic() {
        let (_store, enc) = toy_setup(16, 8);
        let img = noise_image(64, 64, 2);
        let a = enc.encode_image(&img).unwrap();
        let b = enc.encode_image(&img).unwrap();
        assert!(a.patch_embeddings.bit_eq(&b.patch_embeddings));
    }

    #[test]
    fn indivisible_dimensions_are_rejected() {
        let (_store, enc) = toy_setup(16, 8);
        let img = noise_image(65, 64, 3);
        assert!(matches!(
            enc.encode_image(&img),
            Err(EncodeError::BadShape { what: "image height", .. })
        ));
    }

    #[test]
    fn constant_video_spatial_equals_single_frame() {
        let (_store, enc) = toy_setup(8, 8);
        let frame = noise_image(16, 16, 4);
        let frames = vec![frame.clone(); 8];
        let vfeat = enc.encode_video(&frames, 8).unwrap();
        let ifeat = enc.encode_image(&frame).unwrap();
        for (a, b) in vfeat
            .spatial_embeddings
            .data
            .iter()
            .zip(ifeat.patch_embeddings.data.iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
        // all temporal rows equal
        let first = vfeat.temporal_embeddings.row(0).to_vec();
        for t in 1..8 {
            for (a, b) in vfeat.temporal_embeddings.row(t).iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_frame_count_is_rejected() {
        let (_store, enc) = toy_setup(8, 8);
        let frames = vec![noise_image(16, 16, 5); 3];
        assert!(matches!(
            enc.encode_video(&frames, 8),
            Err(EncodeError::BadShape { what: "frame count", .. })
        ));
    }

    #[test]
    fn video_rows_count_is_patches_plus_frames() {
        let (store, enc) = toy_setup(8, 8);
        let frames: Vec<RgbImage> = (0..4).map(|i| noise_image(16, 16, 10 + i)).collect();
        let vfeat = enc.encode_video(&frames, 4).unwrap();
        let proj = project_video(&store, &vfeat).unwrap();
        assert_eq!(proj.rows, 4 + 4); // 2x2 grid + 4 frames
        assert_eq!(proj.cols, 24);
    }

    #[test]
    fn zero_projector_maps_to_zero_rows() {
        let (mut store, enc) = toy_setup(8, 8);
        for name in ["vis_proj.w0", "vis_proj.b0"] {
            for v in store.get_mut(name).data.iter_mut() {
                *v = 0.0;
            }
        }
        let feat = enc.encode_image(&noise_image(16, 16, 6)).unwrap();
        let out = project_image(&store, &feat).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projector_rejects_wrong_width() {
        let (store, _enc) = toy_setup(8, 8);
        let rows = Tensor::zeros(4, 7);
        assert!(matches!(
            project_visual_rows(&store, &rows),
            Err(EncodeError::DimMismatch { .. })
        ));
    }

    #[test]
    fn projection_is_linear_for_depth_one() {
        let (store, enc) = toy_setup(8, 8);
        let f1 = enc.encode_image(&noise_image(16, 16, 7)).unwrap().patch_embeddings;
        let f2 = enc.encode_image(&noise_image(16, 16, 8)).unwrap().patch_embeddings;
        let mut sum = Tensor::zeros(f1.rows, f1.cols);
        for i in 0..sum.data.len() {
            sum.data[i] = f1.data[i] + f2.data[i];
        }
        let p1 = project_visual_rows(&store, &f1).unwrap();
        let p2 = project_visual_rows(&store, &f2).unwrap();
        let ps = project_visual_rows(&store, &sum).unwrap();
        let bias = store.get("vis_proj.b0");
        for r in 0..ps.rows {
            for c in 0..ps.cols {
                // affine: proj(a+b) = proj(a) + proj(b) - bias
                let lhs = ps.get(r, c);
                let rhs = p1.get(r, c) + p2.get(r, c) - bias.get(0, c);
                assert!((lhs - rhs).abs() < 1e-9);
            }
        }
    }
}
