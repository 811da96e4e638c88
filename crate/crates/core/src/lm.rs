//! Tiny causal transformer language model.
//!
//! Pre-norm blocks with multi-head causal attention and a tanh MLP.
//! Input embeddings at visual patch positions are replaced by projected
//! visual rows, which is how image/video conditioning enters the
//! likelihood. The coarse-grained loss is the mean next-token NLL over
//! loss-masked positions; hidden states (final layer, pre LM head) at
//! `<SEG>`/`<LOC>` positions feed the task heads.
//!
//! The token embedding table is assembled by concatenating the base-word
//! table with one tiny tensor per special token, so freeze scopes can
//! target individual special embeddings (stage I trains the video ones).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::heads::ParamLease;
use crate::params::{init_normal, init_ones, init_xavier, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tokens::TokenLayout;

/// Parameter-name suffixes for the ten special-token embeddings, in
/// vocabulary order (ids follow the base vocabulary in this order).
pub const SPECIAL_EMB_NAMES: [&str; 10] = [
    "img_beg", "img_patch", "img_end", "vid_beg", "vid_patch", "vid_end", "tag_open", "tag_close",
    "loc", "seg",
];

pub const LM_SCOPE: &str = "lm.";
/// Scope prefix covering the three video special-token embeddings.
pub const VIDEO_EMB_SCOPE: &str = "lm.emb.special.vid";

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LMConfig {
    /// Base vocabulary size; special tokens occupy the next ten ids.
    pub base_vocab: usize,
    pub d_lm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Attention context window k (positions visible including self);
    /// set to `max_sequence_length` for full causal attention.
    pub context_window: usize,
    pub max_sequence_length: usize,
}

impl LMConfig {
    pub fn vocab_size(&self) -> usize {
        self.base_vocab + SPECIAL_EMB_NAMES.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_lm / self.n_heads
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.d_lm % self.n_heads != 0 {
            return Err(LmError::BadConfig(format!(
                "d_lm {} not divisible by n_heads {}",
                self.d_lm, self.n_heads
            )));
        }
        if self.context_window == 0 || self.max_sequence_length == 0 {
            return Err(LmError::BadConfig("zero-sized window or sequence".into()));
        }
        Ok(())
    }
}

/// Final-layer hidden states and LM logits for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LMOutput {
    /// `[L x vocab_size]`
    pub logits: Tensor,
    /// `[L x d_lm]`, final layer, pre LM head.
    pub hidden_states: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LmError {
    DimMismatch { what: &'static str, expected: usize, got: usize },
    SequenceTooLong { len: usize, max: usize },
    EmptyLossMask,
    IndexOutOfRange { index: usize, len: usize },
    BadConfig(String),
}

impl core::fmt::Display for LmError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LmError::DimMismatch { what, expected, got } => {
                write!(f, "{what}: expected {expected}, got {got}")
            }
            LmError::SequenceTooLong { len, max } => {
                write!(f, "sequence of {len} tokens exceeds max {max}")
            }
            LmError::EmptyLossMask => write!(f, "loss mask has no true positions"),
            LmError::IndexOutOfRange { index, len } => {
                write!(f, "position {index} out of range for length {len}")
            }
            LmError::BadConfig(msg) => write!(f, "bad LM config: {msg}"),
        }
    }
}

/// Creates all LM parameters in the store.
pub fn init_lm(store: &mut ParamStore, rng: &mut SeededRng, cfg: &LMConfig) {
    let d = cfg.d_lm;
    store.insert("lm.emb.base", init_normal(rng, cfg.base_vocab, d, 0.05));
    for name in SPECIAL_EMB_NAMES {
        store.insert(&format!("lm.emb.special.{name}"), init_normal(rng, 1, d, 0.05));
    }
    store.insert("lm.pos", init_normal(rng, cfg.max_sequence_length, d, 0.02));
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("lm.layer{l}.{s}");
        store.insert(&p("ln1.g"), init_ones(1, d));
        store.insert(&p("ln1.b"), Tensor::zeros(1, d));
        store.insert(&p("attn.wq"), init_xavier(rng, d, d));
        store.insert(&p("attn.wk"), init_xavier(rng, d, d));
        store.insert(&p("attn.wv"), init_xavier(rng, d, d));
        store.insert(&p("attn.wo"), init_xavier(rng, d, d));
        store.insert(&p("attn.bo"), Tensor::zeros(1, d));
        store.insert(&p("ln2.g"), init_ones(1, d));
        store.insert(&p("ln2.b"), Tensor::zeros(1, d));
        store.insert(&p("mlp.w1"), init_xavier(rng, d, cfg.d_ff));
        store.insert(&p("mlp.b1"), Tensor::zeros(1, cfg.d_ff));
        store.insert(&p("mlp.w2"), init_xavier(rng, cfg.d_ff, d));
        store.insert(&p("mlp.b2"), Tensor::zeros(1, d));
    }
    store.insert("lm.ln_f.g", init_ones(1, d));
    store.insert("lm.ln_f.b", Tensor::zeros(1, d));
    store.insert("lm.head.w", init_xavier(rng, d, cfg.vocab_size()));
}

struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Graph-bound LM parameters.
pub struct LmVars {
    cfg: LMConfig,
    emb_full: Var,
    pos: Var,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
}

/// Graph handles for one forward pass.
pub struct LmForward {
    pub logits: Var,
    pub hidden: Var,
}

impl LmVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, lease: &mut ParamLease, cfg: &LMConfig) -> Self {
        let base = lease.var(g, store, "lm.emb.base");
        let mut parts = vec![base];
        for name in SPECIAL_EMB_NAMES {
            parts.push(lease.var(g, store, &format!("lm.emb.special.{name}")));
        }
        let emb_full = g.concat_rows(&parts);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("lm.layer{l}.{s}");
            layers.push(LayerVars {
                ln1_g: lease.var(g, store, &p("ln1.g")),
                ln1_b: lease.var(g, store, &p("ln1.b")),
                wq: lease.var(g, store, &p("attn.wq")),
                wk: lease.var(g, store, &p("attn.wk")),
                wv: lease.var(g, store, &p("attn.wv")),
                wo: lease.var(g, store, &p("attn.wo")),
                bo: lease.var(g, store, &p("attn.bo")),
                ln2_g: lease.var(g, store, &p("ln2.g")),
                ln2_b: lease.var(g, store, &p("ln2.b")),
                w1: lease.var(g, store, &p("mlp.w1")),
                b1: lease.var(g, store, &p("mlp.b1")),
                w2: lease.var(g, store, &p("mlp.w2")),
                b2: lease.var(g, store, &p("mlp.b2")),
            });
        }
        LmVars {
            cfg: cfg.clone(),
            emb_full,
            pos: lease.var(g, store, "lm.pos"),
            layers,
            lnf_g: lease.var(g, store, "lm.ln_f.g"),
            lnf_b: lease.var(g, store, "lm.ln_f.b"),
            head_w: lease.var(g, store, "lm.head.w"),
        }
    }

    /// Teacher-forced forward pass. `visual_embeds` must supply exactly
    /// one row per patch-token position when the layout has a span.
    pub fn forward(
        &self,
        g: &mut Graph,
        layout: &TokenLayout,
        visual_embeds: Option<Var>,
    ) -> Result<LmForward, LmError> {
        let len = layout.len();
        if len == 0 {
            return Err(LmError::DimMismatch { what: "sequence length", expected: 1, got: 0 });
        }
        if len > self.cfg.max_sequence_length {
            return Err(LmError::SequenceTooLong { len, max: self.cfg.max_sequence_length });
        }
        let vocab = self.cfg.vocab_size();
        let ids: Vec<usize> = layout
            .token_ids
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t >= vocab {
                    Err(LmError::IndexOutOfRange { index: t, len: vocab })
                } else {
                    Ok(t)
                }
            })
            .collect::<Result<_, _>>()?;

        let tok = g.gather_rows(self.emb_full, ids);
        let tok = match (layout.visual_span, visual_embeds) {
            (Some((start, span_len)), Some(vis)) => {
                let rows = g.value(vis).rows;
                if rows != span_len {
                    return Err(LmError::DimMismatch {
                        what: "visual embed rows",
                        expected: span_len,
                        got: rows,
                    });
                }
                if g.value(vis).cols != self.cfg.d_lm {
                    return Err(LmError::DimMismatch {
                        what: "visual embed width",
                        expected: self.cfg.d_lm,
                        got: g.value(vis).cols,
                    });
                }
                g.overwrite_rows(tok, vis, start)
            }
            (Some(_), None) => {
                return Err(LmError::DimMismatch {
                    what: "visual embeds for layout with span",
                    expected: 1,
                    got: 0,
                })
            }
            (None, Some(_)) => {
                return Err(LmError::DimMismatch {
                    what: "layout span for provided visual embeds",
                    expected: 1,
                    got: 0,
                })
            }
            (None, None) => tok,
        };

        let pos_rows = g.gather_rows(self.pos, (0..len).collect());
        let mut x = g.add(tok, pos_rows);

        let scale = 1.0 / crate::mathfn::sqrt(self.cfg.head_dim() as f64);
        for layer in &self.layers {
            let h = g.layer_norm(x, layer.ln1_g, layer.ln1_b);
            let q = g.matmul(h, layer.wq);
            let k = g.matmul(h, layer.wk);
            let v = g.matmul(h, layer.wv);
            let hd = self.cfg.head_dim();
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for hi in 0..self.cfg.n_heads {
                let qh = g.slice_cols(q, hi * hd, hd);
                let kh = g.slice_cols(k, hi * hd, hd);
                let vh = g.slice_cols(v, hi * hd, hd);
                let scores = g.matmul_nt(qh, kh);
                let scores = g.mul_scalar(scores, scale);
                let probs = g.causal_softmax(scores, self.cfg.context_window);
                heads.push(g.matmul(probs, vh));
            }
            let merged = g.concat_cols(&heads);
            let attn_out = g.linear(merged, layer.wo, layer.bo);
            x = g.add(x, attn_out);

            let h2 = g.layer_norm(x, layer.ln2_g, layer.ln2_b);
            let m = g.linear(h2, layer.w1, layer.b1);
            let m = g.tanh(m);
            let m = g.linear(m, layer.w2, layer.b2);
            x = g.add(x, m);
        }

        let hidden = g.layer_norm(x, self.lnf_g, self.lnf_b);
        let logits = g.matmul(hidden, self.head_w);
        Ok(LmForward { logits, hidden })
    }
}

/// Mean next-token NLL over loss-masked positions: position i contributes
/// `-log P(token[i] | prefix)` via the logits at row i-1.
pub fn coarse_grained_loss_var(
    g: &mut Graph,
    logits: Var,
    layout: &TokenLayout,
) -> Result<Var, LmError> {
    let len = layout.len();
    if g.value(logits).rows != len {
        return Err(LmError::DimMismatch {
            what: "logit rows",
            expected: len,
            got: g.value(logits).rows,
        });
    }
    // Row i predicts token i+1; the last row predicts nothing.
    let mut targets = vec![0u32; len];
    let mut mask = vec![false; len];
    let mut any = false;
    for i in 1..len {
        if layout.loss_mask[i] {
            targets[i - 1] = layout.token_ids[i];
            mask[i - 1] = true;
            any = true;
        }
    }
    if !any {
        return Err(LmError::EmptyLossMask);
    }
    Ok(g.masked_nll_mean(logits, targets, mask))
}

/// Forward-only evaluation.
pub fn forward_eval(
    store: &ParamStore,
    cfg: &LMConfig,
    layout: &TokenLayout,
    visual_embeds: Option<&Tensor>,
) -> Result<LMOutput, LmError> {
    cfg.validate()?;
    let mut g = Graph::new();
    let mut lease = ParamLease::new();
    let lm = LmVars::bind(&mut g, store, &mut lease, cfg);
    let vis = visual_embeds.map(|t| g.leaf(t.clone()));
    let fwd = lm.forward(&mut g, layout, vis)?;
    Ok(LMOutput {
        logits: g.value(fwd.logits).clone(),
        hidden_states: g.value(fwd.hidden).clone(),
    })
}

/// Forward-only coarse-grained loss from an existing output.
pub fn coarse_grained_loss(output: &LMOutput, layout: &TokenLayout) -> Result<f64, LmError> {
    let mut g = Graph::new();
    let logits = g.leaf(output.logits.clone());
    let loss = coarse_grained_loss_var(&mut g, logits, layout)?;
    Ok(g.item(loss))
}

/// Gathers hidden-state rows at the layout's `<SEG>` and `<LOC>` positions.
pub fn extract_task_states(
    output: &LMOutput,
    layout: &TokenLayout,
) -> Result<(Tensor, Tensor), LmError> {
    let gather = |positions: &[usize]| -> Result<Tensor, LmError> {
        let d = output.hidden_states.cols;
        let mut out = Tensor::zeros(positions.len(), d);
        for (r, &p) in positions.iter().enumerate() {
            if p >= output.hidden_states.rows {
                return Err(LmError::IndexOutOfRange { index: p, len: output.hidden_states.rows });
            }
            out.row_mut(r).copy_from_slice(output.hidden_states.row(p));
        }
        Ok(out)
    };
    Ok((gather(&layout.seg_positions)?, gather(&layout.loc_positions)?))
}

/// Greedy decoding. Stops after emitting `eos_id` or when the budget is
/// exhausted; generated `<SEG>`/`<LOC>` positions are recorded in the
/// returned layout and generated tokens are loss-masked true (they belong
/// to the assistant turn).
#[allow(clippy::too_many_arguments)]
pub fn generate(
    store: &ParamStore,
    cfg: &LMConfig,
    prompt: &TokenLayout,
    visual_embeds: Option<&Tensor>,
    max_new_tokens: usize,
    eos_id: u32,
    seg_id: u32,
    loc_id: u32,
) -> Result<TokenLayout, LmError> {
    if prompt.len() + max_new_tokens > cfg.max_sequence_length {
        return Err(LmError::SequenceTooLong {
            len: prompt.len() + max_new_tokens,
            max: cfg.max_sequence_length,
        });
    }
    let mut layout = prompt.clone();
    for _ in 0..max_new_tokens {
        let out = forward_eval(store, cfg, &layout, visual_embeds)?;
        let last = out.logits.row(out.logits.rows - 1);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in last.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let id = best as u32;
        if id == seg_id {
            layout.seg_positions.push(layout.len());
        } else if id == loc_id {
            layout.loc_positions.push(layout.len());
        }
        layout.token_ids.push(id);
        layout.loss_mask.push(true);
        if id == eos_id {
            break;
        }
    }
    Ok(layout)
}
