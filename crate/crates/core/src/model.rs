//! Whole-model assembly: configuration, parameter initialization, and the
//! per-sample loss graph joining the LM, projector, and both heads.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoders::{
    init_visual_projector, ImageFeature, ToyImageEncoder, VisualProjectorVars,
};
use crate::graph::{Graph, Var};
use crate::heads::{
    init_pixel_head, init_region_head, NormalizedBox, ParamLease, PixelHeadVars, RegionHeadVars,
};
use crate::lm::{coarse_grained_loss_var, init_lm, LMConfig, LmError, LmVars};
use crate::losses::{
    bce_loss_var, box_vars_const, dice_loss_var, giou_loss_var, l1_box_loss_var, LossBreakdown,
    LossConfig,
};
use crate::mask::BinaryMask;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tokens::{SpecialTokenTable, TokenLayout};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub lm: LMConfig,
    pub d_vis: usize,
    /// Image patch side in pixels; images are `image_size`-square.
    pub patch_size: usize,
    pub image_size: usize,
    /// Video frame count T.
    pub n_frames: usize,
    pub d_prompt: usize,
    pub d_box: usize,
    /// 1 = single linear projector, 2 = tanh MLP.
    pub projector_depth: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size / self.patch_size, self.image_size / self.patch_size)
    }

    pub fn n_img_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn table(&self) -> SpecialTokenTable {
        SpecialTokenTable::new(self.lm.base_vocab, self.n_img_patches(), self.n_frames)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.lm.validate().map_err(ModelError::Lm)?;
        if self.image_size % self.patch_size != 0 {
            return Err(ModelError::BadConfig(
                "image size not divisible by patch size".into(),
            ));
        }
        if self.d_box % 2 != 0 {
            return Err(ModelError::BadConfig("d_box must be even".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Lm(LmError),
    BadConfig(String),
    /// Target count disagrees with the layout's task-token count.
    TargetMismatch { what: &'static str, tokens: usize, targets: usize },
    /// Mask decoding needs per-patch image features.
    MissingImageFeature,
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::Lm(e) => write!(f, "{e}"),
            ModelError::BadConfig(m) => write!(f, "bad model config: {m}"),
            ModelError::TargetMismatch { what, tokens, targets } => {
                write!(f, "{what}: {tokens} task tokens vs {targets} targets")
            }
            ModelError::MissingImageFeature => {
                write!(f, "mask target on a sample without image features")
            }
        }
    }
}

impl From<LmError> for ModelError {
    fn from(e: LmError) -> Self {
        ModelError::Lm(e)
    }
}

/// Model parameters plus their configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Seed-deterministic initialization of every subsystem.
    pub fn init(cfg: ModelConfig) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut root = SeededRng::new(cfg.seed);
        let mut enc_rng = root.fork(1);
        let mut lm_rng = root.fork(2);
        let mut proj_rng = root.fork(3);
        let mut heads_rng = root.fork(4);
        ToyImageEncoder::init(&mut store, &mut enc_rng, cfg.patch_size, cfg.d_vis);
        init_lm(&mut store, &mut lm_rng, &cfg.lm);
        init_visual_projector(
            &mut store,
            &mut proj_rng,
            cfg.d_vis,
            cfg.lm.d_lm,
            cfg.projector_depth,
        );
        init_pixel_head(
            &mut store,
            &mut heads_rng,
            cfg.lm.d_lm,
            cfg.d_vis,
            cfg.d_prompt,
            cfg.patch_size * cfg.patch_size,
        );
        init_region_head(&mut store, &mut heads_rng, cfg.lm.d_lm, cfg.d_box);
        Ok(Model { cfg, store })
    }

    pub fn encoder(&self) -> ToyImageEncoder {
        ToyImageEncoder::from_store(&self.store, self.cfg.patch_size)
    }

    pub fn n_parameters(&self) -> usize {
        self.store.n_scalars()
    }
}

/// Encoder output attached to a prepared sample. `rows` feeds the
/// projector (one row per patch token); `image_feature` feeds the mask
/// decoder and is present for image samples only.
#[derive(Debug, Clone)]
pub struct PreparedVisual {
    pub rows: Tensor,
    pub image_feature: Option<ImageFeature>,
}

/// A training-ready sample: rendered layout, encoded visual features, and
/// per-task targets paired index-for-index with `<SEG>`/`<LOC>` tokens.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub layout: TokenLayout,
    pub visual: Option<PreparedVisual>,
    pub mask_targets: Vec<BinaryMask>,
    pub box_targets: Vec<NormalizedBox>,
}

/// All graph-bound parameters for one training or inference step.
pub struct ModelVars {
    pub lm: LmVars,
    pub proj: VisualProjectorVars,
    pub pixel: PixelHeadVars,
    pub region: RegionHeadVars,
}

impl ModelVars {
    pub fn bind(g: &mut Graph, model: &Model, lease: &mut ParamLease) -> Self {
        ModelVars {
            lm: LmVars::bind(g, &model.store, lease, &model.cfg.lm),
            proj: VisualProjectorVars::bind(g, &model.store, lease),
            pixel: PixelHeadVars::bind(g, &model.store, lease),
            region: RegionHeadVars::bind(g, &model.store, lease),
        }
    }

    /// Builds the fine-grained loss graph for one sample and reports the
    /// concrete component values.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        loss_cfg: &LossConfig,
        sample: &PreparedSample,
    ) -> Result<(Var, LossBreakdown), ModelError> {
        if sample.mask_targets.len() != sample.layout.seg_positions.len() {
            return Err(ModelError::TargetMismatch {
                what: "masks",
                tokens: sample.layout.seg_positions.len(),
                targets: sample.mask_targets.len(),
            });
        }
        if sample.box_targets.len() != sample.layout.loc_positions.len() {
            return Err(ModelError::TargetMismatch {
                what: "boxes",
                tokens: sample.layout.loc_positions.len(),
                targets: sample.box_targets.len(),
            });
        }

        let vis_var = match &sample.visual {
            Some(v) => {
                let rows = g.leaf(v.rows.clone());
                Some(self.proj.project(g, rows))
            }
            None => None,
        };
        let fwd = self.lm.forward(g, &sample.layout, vis_var)?;
        let l_cgl = coarse_grained_loss_var(g, fwd.logits, &sample.layout)?;

        let mut breakdown = LossBreakdown {
            l_cgl: g.item(l_cgl),
            ..LossBreakdown::default()
        };
        let mut total = l_cgl;

        let use_mask = !sample.mask_targets.is_empty();
        let use_box = !sample.box_targets.is_empty() && (!use_mask || loss_cfg.add_both_branches);

        if use_mask {
            let feature = sample
                .visual
                .as_ref()
                .and_then(|v| v.image_feature.as_ref())
                .ok_or(ModelError::MissingImageFeature)?;
            let feat_var = g.leaf(feature.patch_embeddings.clone());
            let scale = 1.0 / sample.mask_targets.len() as f64;
            let mut bce_acc: Option<Var> = None;
            let mut dice_acc: Option<Var> = None;
            for (i, target) in sample.mask_targets.iter().enumerate() {
                let pos = sample.layout.seg_positions[i];
                let state = g.gather_rows(fwd.hidden, alloc::vec![pos]);
                let logits =
                    self.pixel
                        .mask_logits(g, state, feat_var, feature.grid_shape, cfg.patch_size);
                let bce = bce_loss_var(g, logits, target);
                let dice = dice_loss_var(g, logits, target, loss_cfg.dice_epsilon);
                bce_acc = Some(match bce_acc {
                    None => bce,
                    Some(a) => g.add(a, bce),
                });
                dice_acc = Some(match dice_acc {
                    None => dice,
                    Some(a) => g.add(a, dice),
                });
            }
            let bce = g.mul_scalar(bce_acc.unwrap(), scale);
            let dice = g.mul_scalar(dice_acc.unwrap(), scale);
            let bce_w = g.mul_scalar(bce, loss_cfg.alpha1);
            let dice_w = g.mul_scalar(dice, loss_cfg.alpha2);
            let pixel = g.add(bce_w, dice_w);
            breakdown.l_bce = Some(g.item(bce));
            breakdown.l_dice = Some(g.item(dice));
            breakdown.l_pixel = Some(g.item(pixel));
            total = g.add(total, pixel);
        }

        if use_box {
            let scale = 1.0 / sample.box_targets.len() as f64;
            let mut l1_acc: Option<Var> = None;
            let mut giou_acc: Option<Var> = None;
            for (i, target) in sample.box_targets.iter().enumerate() {
                let pos = sample.layout.loc_positions[i];
                let state = g.gather_rows(fwd.hidden, alloc::vec![pos]);
                let pred = self.region.box_vars(g, state);
                let tvars = box_vars_const(g, target);
                let l1 = l1_box_loss_var(g, &pred, &tvars);
                let giou = giou_loss_var(g, &pred, &tvars);
                l1_acc = Some(match l1_acc {
                    None => l1,
                    Some(a) => g.add(a, l1),
                });
                giou_acc = Some(match giou_acc {
                    None => giou,
                    Some(a) => g.add(a, giou),
                });
            }
            let l1 = g.mul_scalar(l1_acc.unwrap(), scale);
            let giou = g.mul_scalar(giou_acc.unwrap(), scale);
            let l1_w = g.mul_scalar(l1, loss_cfg.beta1);
            let giou_w = g.mul_scalar(giou, loss_cfg.beta2);
            let region = g.add(l1_w, giou_w);
            breakdown.l_l1 = Some(g.item(l1));
            breakdown.l_giou = Some(g.item(giou));
            breakdown.l_region = Some(g.item(region));
            total = g.add(total, region);
        }

        breakdown.l_fgl = g.item(total);
        Ok((total, breakdown))
    }

    /// Mean loss over a batch (per-sample losses averaged), with one
    /// breakdown per sample.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        loss_cfg: &LossConfig,
        batch: &[&PreparedSample],
    ) -> Result<(Var, Vec<LossBreakdown>), ModelError> {
        assert!(!batch.is_empty(), "empty batch");
        let mut acc: Option<Var> = None;
        let mut breakdowns = Vec::with_capacity(batch.len());
        for sample in batch {
            let (loss, bd) = self.sample_loss(g, cfg, loss_cfg, sample)?;
            breakdowns.push(bd);
            acc = Some(match acc {
                None => loss,
                Some(a) => g.add(a, loss),
            });
        }
        let mean = g.mul_scalar(acc.unwrap(), 1.0 / batch.len() as f64);
        Ok((mean, breakdowns))
    }
}

/// One backward pass: gradients for every parameter the lease bound,
/// keyed by name. Callers filter by trainable scope before the optimizer
/// step.
pub fn collect_gradients(
    g: &mut Graph,
    lease: &ParamLease,
    loss: Var,
) -> BTreeMap<String, Vec<f64>> {
    g.backward(loss);
    lease
        .bound()
        .map(|(name, &var)| (name.clone(), g.grad(var).to_vec()))
        .collect()
}
