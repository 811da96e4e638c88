//! Finite-difference verification of every backward pass: individual
//! graph ops, the loss primitives, and the full model graph (LM with
//! injected visual embeddings, both heads, composed loss).

use uvlm_core::check::{compare_gradient, model_gradient_check, visual_embedding_gradient_check};
use uvlm_core::encoders::RgbImage;
use uvlm_core::graph::{Graph, Var};
use uvlm_core::heads::NormalizedBox;
use uvlm_core::lm::LMConfig;
use uvlm_core::losses::{
    bce_loss_var, box_vars_const, dice_loss_var, giou_loss_var, l1_box_loss_var, LossConfig,
};
use uvlm_core::mask::BinaryMask;
use uvlm_core::model::{Model, ModelConfig, PreparedSample, PreparedVisual};
use uvlm_core::rng::SeededRng;
use uvlm_core::tensor::Tensor;
use uvlm_core::tokens::{render_sample, Conversation, Role, Turn, Vocab, VisualKind};

/// Reduces an op output to a scalar through fixed pseudo-random weights
/// so the check is sensitive to every output entry.
fn to_probe_scalar(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).len();
    let weights: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7311 + 0.2).sin() + 0.1).collect();
    g.weighted_sum(v, weights)
}

/// FD-checks d(scalar)/d(inputs[i]) for a multi-input graph builder.
fn check_op(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    rel_tol: f64,
    label: &str,
) {
    let run = |tensors: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let scalar = if g.value(out).len() == 1 { out } else { to_probe_scalar(&mut g, out) };
        let value = g.item(scalar);
        g.backward(scalar);
        let grads = vars.iter().map(|&v| g.grad(v).to_vec()).collect();
        (value, grads)
    };
    let (_, analytic) = run(inputs);
    for (i, input) in inputs.iter().enumerate() {
        let mut f = |v: &[f64]| {
            let mut perturbed = inputs.to_vec();
            perturbed[i] = Tensor::from_vec(input.rows, input.cols, v.to_vec());
            run(&perturbed).0
        };
        let report = compare_gradient(&mut f, &input.data, &analytic[i], rel_tol, 1e-9);
        assert!(
            report.ok(),
            "{label} input {i}: max rel err {:.3e}\n{}",
            report.max_rel_err,
            report.failures.join("\n")
        );
    }
}

fn rand_tensor(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data.iter_mut() {
        *v = rng.normal_scaled(scale);
    }
    t
}

#[test]
fn elementwise_ops_gradcheck() {
    let mut rng = SeededRng::new(1);
    let a = rand_tensor(&mut rng, 3, 4, 1.0);
    let b = rand_tensor(&mut rng, 3, 4, 1.0);
    check_op(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), 1e-6, "add");
    check_op(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), 1e-6, "sub");
    check_op(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), 1e-6, "mul");
    // keep denominators away from zero
    let mut bpos = b.clone();
    for v in bpos.data.iter_mut() {
        *v = v.abs() + 0.5;
    }
    check_op(&[a.clone(), bpos], |g, v| g.div(v[0], v[1]), 1e-6, "div");
    check_op(&[a.clone(), b.clone()], |g, v| g.min_elem(v[0], v[1]), 1e-6, "min");
    check_op(&[a.clone(), b], |g, v| g.max_elem(v[0], v[1]), 1e-6, "max");
    check_op(&[a.clone()], |g, v| g.tanh(v[0]), 1e-6, "tanh");
    check_op(&[a.clone()], |g, v| g.sigmoid(v[0]), 1e-6, "sigmoid");
    check_op(&[a.clone()], |g, v| g.mul_scalar(v[0], -1.7), 1e-6, "mul_scalar");
    check_op(&[a.clone()], |g, v| g.add_scalar(v[0], 0.3), 1e-6, "add_scalar");
    // bias inputs away from the |.| and relu kinks
    let mut shifted = a.clone();
    for v in shifted.data.iter_mut() {
        *v += if *v >= 0.0 { 0.2 } else { -0.2 };
    }
    check_op(&[shifted.clone()], |g, v| g.abs(v[0]), 1e-6, "abs");
    check_op(&[shifted], |g, v| g.relu(v[0]), 1e-6, "relu");
}

#[test]
fn linear_algebra_ops_gradcheck() {
    let mut rng = SeededRng::new(2);
    let a = rand_tensor(&mut rng, 3, 5, 1.0);
    let b = rand_tensor(&mut rng, 5, 2, 1.0);
    check_op(&[a.clone(), b], |g, v| g.matmul(v[0], v[1]), 1e-6, "matmul");
    let c = rand_tensor(&mut rng, 4, 5, 1.0);
    check_op(&[a.clone(), c], |g, v| g.matmul_nt(v[0], v[1]), 1e-6, "matmul_nt");
    let row = rand_tensor(&mut rng, 1, 5, 1.0);
    check_op(&[a.clone(), row], |g, v| g.add_row(v[0], v[1]), 1e-6, "add_row");
    check_op(&[a.clone()], |g, v| g.sum_all(v[0]), 1e-6, "sum_all");
    check_op(&[a], |g, v| g.mean_all(v[0]), 1e-6, "mean_all");
}

#[test]
fn fused_neural_ops_gradcheck() {
    let mut rng = SeededRng::new(3);
    let x = rand_tensor(&mut rng, 4, 6, 1.0);
    let gain = rand_tensor(&mut rng, 1, 6, 0.5);
    let bias = rand_tensor(&mut rng, 1, 6, 0.5);
    check_op(
        &[x.clone(), gain, bias],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
        1e-5,
        "layer_norm",
    );

    let scores = rand_tensor(&mut rng, 5, 5, 1.5);
    check_op(&[scores.clone()], |g, v| g.causal_softmax(v[0], usize::MAX), 1e-5, "causal_softmax");
    check_op(&[scores], |g, v| g.causal_softmax(v[0], 3), 1e-5, "windowed_softmax");

    let logits = rand_tensor(&mut rng, 4, 7, 1.5);
    let targets = vec![2u32, 0, 5, 6];
    let mask = vec![true, false, true, true];
    check_op(
        &[logits.clone()],
        move |g, v| g.masked_nll_mean(v[0], targets.clone(), mask.clone()),
        1e-5,
        "masked_nll",
    );

    let z = rand_tensor(&mut rng, 3, 3, 2.0);
    let target: Vec<bool> = (0..9).map(|i| i % 2 == 0).collect();
    check_op(
        &[z],
        move |g, v| g.bce_with_logits_mean(v[0], target.clone()),
        1e-5,
        "bce_with_logits",
    );
}

#[test]
fn gather_scatter_ops_gradcheck() {
    let mut rng = SeededRng::new(4);
    let table = rand_tensor(&mut rng, 6, 3, 1.0);
    check_op(
        &[table],
        |g, v| g.gather_rows(v[0], vec![0, 2, 2, 5]),
        1e-6,
        "gather_rows",
    );

    let base = rand_tensor(&mut rng, 5, 3, 1.0);
    let patch = rand_tensor(&mut rng, 2, 3, 1.0);
    check_op(
        &[base, patch],
        |g, v| g.overwrite_rows(v[0], v[1], 1),
        1e-6,
        "overwrite_rows",
    );

    let p1 = rand_tensor(&mut rng, 2, 3, 1.0);
    let p2 = rand_tensor(&mut rng, 3, 3, 1.0);
    check_op(&[p1, p2], |g, v| g.concat_rows(&[v[0], v[1]]), 1e-6, "concat_rows");

    let c1 = rand_tensor(&mut rng, 3, 2, 1.0);
    let c2 = rand_tensor(&mut rng, 3, 4, 1.0);
    check_op(&[c1, c2], |g, v| g.concat_cols(&[v[0], v[1]]), 1e-6, "concat_cols");

    let wide = rand_tensor(&mut rng, 3, 6, 1.0);
    check_op(&[wide], |g, v| g.slice_cols(v[0], 1, 3), 1e-6, "slice_cols");

    let x = rand_tensor(&mut rng, 2, 6, 1.0);
    let perm: Vec<usize> = (0..12).rev().collect();
    check_op(&[x], move |g, v| g.reindex(v[0], perm.clone(), 3, 4), 1e-6, "reindex");

    let grid = rand_tensor(&mut rng, 6, 2, 1.0); // 3x2 grid, 2 channels
    let w = rand_tensor(&mut rng, 18, 3, 0.5);
    let b = rand_tensor(&mut rng, 1, 3, 0.5);
    check_op(
        &[grid, w, b],
        |g, v| g.conv3x3(v[0], v[1], v[2], (3, 2)),
        1e-5,
        "conv3x3",
    );

    let v4 = rand_tensor(&mut rng, 1, 4, 1.0);
    check_op(&[v4], |g, v| g.index_scalar(v[0], 2), 1e-6, "index_scalar");
}

#[test]
fn loss_primitives_gradcheck_at_1e4() {
    let mut rng = SeededRng::new(5);
    // BCE and Dice over an 8x8 mask
    let target = BinaryMask::from_fn(8, 8, |r, c| (r + 2 * c) % 3 == 0);
    let logits = rand_tensor(&mut rng, 8, 8, 1.2);
    let t1 = target.clone();
    check_op(
        &[logits.clone()],
        move |g, v| bce_loss_var(g, v[0], &t1),
        1e-4,
        "bce_loss",
    );
    let t2 = target;
    check_op(
        &[logits],
        move |g, v| dice_loss_var(g, v[0], &t2, 1e-6),
        1e-4,
        "dice_loss",
    );

    // L1 and GIoU through the sigmoid + sort parameterization, with raw
    // values away from the sort boundary (distinct coordinates).
    let raw = Tensor::from_vec(1, 4, vec![-0.8, 0.4, 1.1, -1.5]);
    let target_box = NormalizedBox::new(0.2, 0.1, 0.7, 0.55);
    let tb1 = target_box;
    check_op(
        &[raw.clone()],
        move |g, v| {
            let pred = uvlm_core::heads::box_vars_from_raw(g, v[0]);
            let t = box_vars_const(g, &tb1);
            l1_box_loss_var(g, &pred, &t)
        },
        1e-4,
        "l1_box_loss",
    );
    let tb2 = target_box;
    check_op(
        &[raw.clone()],
        move |g, v| {
            let pred = uvlm_core::heads::box_vars_from_raw(g, v[0]);
            let t = box_vars_const(g, &tb2);
            giou_loss_var(g, &pred, &t)
        },
        1e-4,
        "giou_loss_overlapping",
    );
    // disjoint case exercises the relu(0) clamp from the other side
    let far = NormalizedBox::new(0.9, 0.9, 0.95, 0.97);
    check_op(
        &[raw],
        move |g, v| {
            let pred = uvlm_core::heads::box_vars_from_raw(g, v[0]);
            let t = box_vars_const(g, &far);
            giou_loss_var(g, &pred, &t)
        },
        1e-4,
        "giou_loss_disjoint",
    );
}

// ---- full-model checks on the reference toy dims (d_lm = 32, 2 layers) ----

fn spec_toy_vocab() -> Vocab {
    Vocab::build(
        [
            "segment", "out", "the", "red", "ball", "blue", "box", "it", "is", ".", "?", "find",
            "locate", "a",
        ]
        .iter()
        .map(|s| s.to_string()),
        4, // 2x2 patch grid
        2,
    )
}

fn spec_toy_model(vocab: &Vocab) -> Model {
    Model::init(ModelConfig {
        lm: LMConfig {
            base_vocab: vocab.base_len(),
            d_lm: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            context_window: 64,
            max_sequence_length: 64,
        },
        d_vis: 8,
        patch_size: 8,
        image_size: 16,
        n_frames: 2,
        d_prompt: 8,
        d_box: 8,
        projector_depth: 1,
        seed: 1234,
    })
    .unwrap()
}

fn noise_image(seed: u64, size: usize) -> RgbImage {
    let mut rng = SeededRng::new(seed);
    let mut img = RgbImage::new(size, size);
    for v in img.data.iter_mut() {
        *v = (rng.next_u64() & 0xFF) as u8;
    }
    img
}

/// RES+REC sample: one `<SEG>` with a mask target and one `<LOC>` with a
/// box target, so the check covers both heads and every loss branch.
fn full_sample(model: &Model, vocab: &Vocab) -> PreparedSample {
    let conv = Conversation {
        visual: Some(VisualKind::Image),
        turns: vec![
            Turn { role: Role::User, text: "<image> segment out the red ball .".into() },
            Turn {
                role: Role::Assistant,
                text: "it is <tag> ball </tag> <SEG> <LOC> .".into(),
            },
        ],
    };
    let layout = render_sample(&conv, vocab, None).unwrap();
    let feat = model.encoder().encode_image(&noise_image(9, 16)).unwrap();
    let mask = BinaryMask::from_fn(16, 16, |r, c| (4..12).contains(&r) && (6..14).contains(&c));
    PreparedSample {
        layout,
        visual: Some(PreparedVisual {
            rows: feat.patch_embeddings.clone(),
            image_feature: Some(feat),
        }),
        mask_targets: vec![mask],
        box_targets: vec![NormalizedBox::new(0.375, 0.25, 0.875, 0.75)],
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let vocab = spec_toy_vocab();
    let model = spec_toy_model(&vocab);
    let sample = full_sample(&model, &vocab);
    let report = model_gradient_check(&model, &LossConfig::default(), &sample, 1e-3);
    assert!(
        report.ok(),
        "{} of {} gradients off (max rel {:.3e}):\n{}",
        report.failures.len(),
        report.n_checked,
        report.max_rel_err,
        report.failures.join("\n")
    );
}

#[test]
fn visual_embedding_gradients_match_finite_differences() {
    let vocab = spec_toy_vocab();
    let model = spec_toy_model(&vocab);
    let conv = Conversation {
        visual: Some(VisualKind::Image),
        turns: vec![
            Turn { role: Role::User, text: "<image> the red ball ?".into() },
            Turn { role: Role::Assistant, text: "a red ball .".into() },
        ],
    };
    let layout = render_sample(&conv, &vocab, None).unwrap();
    let mut rng = SeededRng::new(77);
    let embeds = rand_tensor(&mut rng, 4, 32, 0.5);
    let report = visual_embedding_gradient_check(&model, &layout, &embeds, 1e-3);
    assert!(
        report.ok(),
        "visual embedding grads off (max rel {:.3e}):\n{}",
        report.max_rel_err,
        report.failures.join("\n")
    );
}
