//! Property tests over the codec, geometry, and layout invariants.

use proptest::prelude::*;

use uvlm_core::graph::Graph;
use uvlm_core::heads::{box_vars_from_raw, NormalizedBox};
use uvlm_core::mask::{mask_to_bbox, rle_decode, rle_encode, BinaryMask};
use uvlm_core::metrics::{box_iou, fuse_rec_outputs, CIoUAccumulator};
use uvlm_core::tensor::Tensor;
use uvlm_core::tokens::{render_sample, Conversation, Role, Turn, Vocab, VisualKind};

fn arb_mask(max_side: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max_side, 1..=max_side)
        .prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w).prop_map(move |bits| {
                let mut m = BinaryMask::new(h, w);
                for r in 0..h {
                    for c in 0..w {
                        m.set(r, c, bits[r * w + c]);
                    }
                }
                m
            })
        })
}

fn arb_box() -> impl Strategy<Value = NormalizedBox> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b, c, d)| {
        NormalizedBox::new(a.min(c), b.min(d), a.max(c), b.max(d))
    })
}

proptest! {
    #[test]
    fn rle_round_trip_is_identity(mask in arb_mask(12)) {
        let rle = rle_encode(&mask);
        let back = rle_decode(&rle).unwrap();
        prop_assert_eq!(mask, back);
    }

    #[test]
    fn rle_counts_alternate_and_sum(mask in arb_mask(12)) {
        let rle = rle_encode(&mask);
        let sum: usize = rle.counts.iter().map(|&c| c as usize).sum();
        prop_assert_eq!(sum, mask.len());
        // every interior run is nonzero; only the leading zero-run may be 0
        for (i, &c) in rle.counts.iter().enumerate() {
            if i > 0 {
                prop_assert!(c > 0);
            }
        }
    }

    #[test]
    fn bbox_contains_every_true_pixel(mask in arb_mask(10)) {
        prop_assume!(mask.count_true() > 0);
        let b = mask_to_bbox(&mask).unwrap();
        let (h, w) = (mask.height as f64, mask.width as f64);
        for r in 0..mask.height {
            for c in 0..mask.width {
                if mask.get(r, c) {
                    prop_assert!(b.x1 <= c as f64 / w && (c + 1) as f64 / w <= b.x2);
                    prop_assert!(b.y1 <= r as f64 / h && (r + 1) as f64 / h <= b.y2);
                }
            }
        }
    }

    #[test]
    fn sorted_sigmoid_box_is_always_valid(raw in proptest::collection::vec(-20.0f64..20.0, 4)) {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::from_vec(1, 4, raw));
        let b = box_vars_from_raw(&mut g, t).to_box(&g);
        prop_assert!(b.is_valid());
    }

    #[test]
    fn box_iou_is_symmetric_bounded(a in arb_box(), b in arb_box()) {
        let ab = box_iou(&a, &b);
        prop_assert_eq!(ab.to_bits(), box_iou(&b, &a).to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn box_iou_is_one_iff_equal_nondegenerate(a in arb_box(), b in arb_box()) {
        prop_assume!(a.area() > 1e-6 && b.area() > 1e-6);
        if a == b {
            prop_assert_eq!(box_iou(&a, &b), 1.0);
        } else if box_iou(&a, &b) == 1.0 {
            // IoU 1 forces equal boxes
            prop_assert!((a.x1 - b.x1).abs() < 1e-12 && (a.x2 - b.x2).abs() < 1e-12);
            prop_assert!((a.y1 - b.y1).abs() < 1e-12 && (a.y2 - b.y2).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_output_is_valid_and_fixed_point(mask in arb_mask(10), lb in arb_box()) {
        prop_assume!(mask.count_true() > 0);
        let fused = fuse_rec_outputs(Some(&lb), Some(&mask)).unwrap();
        prop_assert!(fused.is_valid());
        // single-evidence passthrough
        prop_assert_eq!(fuse_rec_outputs(Some(&lb), None).unwrap(), lb);
        let mb = mask_to_bbox(&mask).unwrap();
        prop_assert_eq!(fuse_rec_outputs(None, Some(&mask)).unwrap(), mb);
        // fixed point when the two agree exactly
        prop_assert_eq!(fuse_rec_outputs(Some(&mb), Some(&mask)).unwrap(), mb);
    }

    #[test]
    fn ciou_merge_matches_sequential(splits in proptest::collection::vec((0u64..50, 0u64..50), 1..6)) {
        let parts: Vec<CIoUAccumulator> = splits
            .iter()
            .map(|&(i, extra)| CIoUAccumulator { total_intersection: i, total_union: i + extra })
            .collect();
        let mut merged = CIoUAccumulator::new();
        for p in &parts {
            merged.merge(p);
        }
        let (si, su) = parts.iter().fold((0, 0), |(a, b), p| {
            (a + p.total_intersection, b + p.total_union)
        });
        prop_assert_eq!(merged.total_intersection, si);
        prop_assert_eq!(merged.total_union, su);
    }
}

fn word_pool() -> Vec<&'static str> {
    vec!["the", "a", "red", "ball", "dog", "box", "what", "is", "here", ".", "?"]
}

fn arb_text(max_words: usize) -> impl Strategy<Value = String> {
    proptest::collection::vec(0..word_pool().len(), 1..=max_words)
        .prop_map(|idx| idx.iter().map(|&i| word_pool()[i]).collect::<Vec<_>>().join(" "))
}

fn arb_conversation() -> impl Strategy<Value = Conversation> {
    let visual = prop_oneof![
        Just(None),
        Just(Some(VisualKind::Image)),
        Just(Some(VisualKind::Video)),
    ];
    (visual, arb_text(6), arb_text(6), any::<bool>(), any::<bool>()).prop_map(
        |(visual, user, answer, add_seg, add_loc)| {
            let placeholder = match visual {
                Some(VisualKind::Image) => "<image> ",
                Some(VisualKind::Video) => "<video> ",
                None => "",
            };
            let mut assistant = answer;
            if add_seg {
                assistant.push_str(" <tag> ball </tag> <SEG>");
            }
            if add_loc {
                assistant.push_str(" <LOC>");
            }
            Conversation {
                visual,
                turns: vec![
                    Turn { role: Role::User, text: format!("{placeholder}{user}") },
                    Turn { role: Role::Assistant, text: assistant },
                ],
            }
        },
    )
}

proptest! {
    #[test]
    fn rendered_layouts_satisfy_structural_invariants(conv in arb_conversation()) {
        let vocab = Vocab::build(word_pool().iter().map(|s| s.to_string()), 4, 2);
        let table = vocab.table().clone();
        let layout = render_sample(&conv, &vocab, None).unwrap();
        layout.validate(&table).unwrap();

        // patch counts are all-or-nothing
        let n_img = layout.token_ids.iter().filter(|&&t| t == table.img_patch).count();
        prop_assert!(n_img == 0 || n_img == table.n_img_patches);
        let n_vid = layout.token_ids.iter().filter(|&&t| t == table.vid_patch).count();
        prop_assert!(n_vid == 0 || n_vid == table.n_img_patches + table.n_frames);

        // loss mask never overlaps visual patch positions
        if let Some((start, len)) = layout.visual_span {
            for p in start..start + len {
                prop_assert!(!layout.loss_mask[p]);
            }
        }

        // round trip through decode preserves the layout exactly
        let decoded = uvlm_core::tokens::decode_layout(&layout, &vocab).unwrap();
        let layout2 = render_sample(&decoded, &vocab, None).unwrap();
        prop_assert_eq!(layout, layout2);
    }
}
