//! Synthetic desk-scale corpora: single-object scenes with exact masks
//! and boxes, used for fixtures, overfit experiments, and the built-in
//! dataset builder.

use std::path::Path;

use uvlm_core::encoders::RgbImage;
use uvlm_core::heads::NormalizedBox;
use uvlm_core::mask::{mask_to_bbox, rle_encode, BinaryMask};
use uvlm_core::rng::SeededRng;
use uvlm_core::tokens::{Role, Turn, VisualKind};

use crate::data::{save_png, save_video, ConversationSample, DataError, TaskKind, VisualRef};
use crate::templates::TemplatePool;

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [204, 40, 40]),
    ("green", [40, 190, 60]),
    ("blue", [50, 80, 220]),
    ("yellow", [220, 210, 50]),
    ("purple", [160, 60, 200]),
    ("cyan", [50, 200, 210]),
];

pub const SHAPES: [&str; 2] = ["ball", "box"];

/// One synthetic scene: a colored shape on a dark noisy background with
/// its exact mask and tight box.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub bbox: NormalizedBox,
    pub class_tag: String,
    pub color: &'static str,
    pub shape: &'static str,
}

pub fn generate_scene(rng: &mut SeededRng, size: usize) -> Scene {
    let (color, rgb) = COLORS[rng.index(COLORS.len())];
    let shape = SHAPES[rng.index(SHAPES.len())];
    let mut image = RgbImage::new(size, size);
    for px in 0..size * size {
        let noise = (rng.next_u64() % 24) as u8;
        let base = 18 + noise;
        image.data[px * 3] = base;
        image.data[px * 3 + 1] = base;
        image.data[px * 3 + 2] = base;
    }
    let half_min = size / 8;
    let half_max = size / 4;
    let half = half_min + rng.index(half_max - half_min + 1);
    let cy = half + rng.index(size - 2 * half);
    let cx = half + rng.index(size - 2 * half);

    let mut mask = BinaryMask::new(size, size);
    for r in 0..size {
        for c in 0..size {
            let dy = r as isize - cy as isize;
            let dx = c as isize - cx as isize;
            let inside = match shape {
                "ball" => dy * dy + dx * dx <= (half * half) as isize,
                _ => dy.unsigned_abs() <= half && dx.unsigned_abs() <= half,
            };
            if inside {
                mask.set(r, c, true);
                image.set_pixel(r, c, rgb);
            }
        }
    }
    let bbox = mask_to_bbox(&mask).expect("synthetic mask is nonempty");
    Scene {
        image,
        mask,
        bbox,
        class_tag: format!("{color} {shape}"),
        color,
        shape,
    }
}

/// T frames of a shape sliding across the scene plus its direction word.
pub fn generate_video(rng: &mut SeededRng, size: usize, t: usize) -> (Vec<RgbImage>, String, String) {
    let base = generate_scene(rng, size);
    let dir = ["left", "right", "up", "down"][rng.index(4)];
    let step = (size / (2 * t.max(1))) as isize;
    let mut frames = Vec::with_capacity(t);
    for f in 0..t {
        let (dy, dx) = match dir {
            "left" => (0, -(f as isize) * step),
            "right" => (0, f as isize * step),
            "up" => (-(f as isize) * step, 0),
            _ => (f as isize * step, 0),
        };
        let mut img = RgbImage::new(size, size);
        // keep the background stable across frames
        for px in 0..size * size {
            let v = base.image.data[px * 3];
            if !base.mask.get(px / size, px % size) {
                img.data[px * 3] = v;
                img.data[px * 3 + 1] = v;
                img.data[px * 3 + 2] = v;
            } else {
                img.data[px * 3] = 20;
                img.data[px * 3 + 1] = 20;
                img.data[px * 3 + 2] = 20;
            }
        }
        for r in 0..size {
            for c in 0..size {
                if base.mask.get(r, c) {
                    let nr = r as isize + dy;
                    let nc = c as isize + dx;
                    if nr >= 0 && nc >= 0 && (nr as usize) < size && (nc as usize) < size {
                        img.set_pixel(nr as usize, nc as usize, base.image.pixel(r, c));
                    }
                }
            }
        }
        frames.push(img);
    }
    (frames, base.class_tag, dir.to_string())
}

fn user_turn(text: String) -> Turn {
    Turn { role: Role::User, text }
}

fn assistant_turn(text: String) -> Turn {
    Turn { role: Role::Assistant, text }
}

/// Generates `n` samples of one task kind, writing media files under
/// `media_dir` and returning records with paths relative to `data_root`.
pub fn build_task_samples(
    task: TaskKind,
    n: usize,
    image_size: usize,
    n_frames: usize,
    seed: u64,
    data_root: &Path,
) -> Result<Vec<ConversationSample>, DataError> {
    let media = data_root.join("media");
    std::fs::create_dir_all(&media)
        .map_err(|e| DataError::Io { path: media.clone(), source: e })?;
    let mut root_rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{}_{i:04}", task.as_str());
        let mut rng = root_rng.fork(i as u64 + 1);
        let sample = match task {
            TaskKind::VideoCaption => {
                let (frames, class, dir) = generate_video(&mut rng, image_size, n_frames);
                let rel = format!("media/{id}.uvv");
                save_video(&frames, &data_root.join(&rel))?;
                let pool = TemplatePool::default_for(task).unwrap();
                ConversationSample {
                    id,
                    task_kind: task,
                    visual_ref: Some(VisualRef { kind: VisualKind::Video, path: rel }),
                    turns: vec![
                        user_turn(pool.instantiate(None, rng.next_u64())?),
                        assistant_turn(format!("the {class} moves {dir} .")),
                    ],
                    target_masks: vec![],
                    target_boxes: vec![],
                }
            }
            _ => {
                let scene = generate_scene(&mut rng, image_size);
                let rel = format!("media/{id}.png");
                save_png(&scene.image, &data_root.join(&rel))?;
                let visual =
                    Some(VisualRef { kind: VisualKind::Image, path: rel });
                let class = scene.class_tag.clone();
                match task {
                    TaskKind::Captioning => {
                        let pool = TemplatePool::default_for(task).unwrap();
                        ConversationSample {
                            id,
                            task_kind: task,
                            visual_ref: visual,
                            turns: vec![
                                user_turn(pool.instantiate(None, rng.next_u64())?),
                                assistant_turn(format!("a photo of a {class} .")),
                            ],
                            target_masks: vec![],
                            target_boxes: vec![],
                        }
                    }
                    TaskKind::Vqa => ConversationSample {
                        id,
                        task_kind: task,
                        visual_ref: visual,
                        turns: vec![
                            user_turn(format!("<image> what color is the {} ?", scene.shape)),
                            assistant_turn(format!("{} .", scene.color)),
                        ],
                        target_masks: vec![],
                        target_boxes: vec![],
                    },
                    TaskKind::Res | TaskKind::SemanticSeg | TaskKind::Salient => {
                        let pool = TemplatePool::default_for(task).unwrap();
                        let question = if pool.uses_class() {
                            pool.instantiate(Some(&class), rng.next_u64())?
                        } else {
                            pool.instantiate(None, rng.next_u64())?
                        };
                        ConversationSample {
                            id,
                            task_kind: task,
                            visual_ref: visual,
                            turns: vec![
                                user_turn(question),
                                assistant_turn(format!("it is <tag>{class}</tag> <SEG> .")),
                            ],
                            target_masks: vec![rle_encode(&scene.mask)],
                            target_boxes: vec![],
                        }
                    }
                    TaskKind::Rec => {
                        let pool = TemplatePool::default_for(task).unwrap();
                        ConversationSample {
                            id,
                            task_kind: task,
                            visual_ref: visual,
                            turns: vec![
                                user_turn(pool.instantiate(Some(&class), rng.next_u64())?),
                                assistant_turn(format!("it is at <tag>{class}</tag> <LOC> .")),
                            ],
                            target_masks: vec![],
                            // boxes converted from the segmentation annotation
                            target_boxes: vec![scene.bbox],
                        }
                    }
                    TaskKind::VideoCaption => unreachable!(),
                }
            }
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

/// All words the built-in corpora can emit; the training vocabulary is
/// built from the actual dataset text plus this floor so rare draws don't
/// shift token ids between runs.
pub fn base_word_pool() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |s: &str| {
        for w in s.split_whitespace() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    };
    for (color, _) in COLORS {
        push(color);
    }
    for shape in SHAPES {
        push(shape);
    }
    for dir in ["left", "right", "up", "down"] {
        push(dir);
    }
    push("a photo of it is at the moves what color . ? ,");
    for task in TaskKind::ALL {
        if let Some(pool) = TemplatePool::default_for(task) {
            for t in &pool.templates {
                for w in uvlm_core::tokens::extract_words(t) {
                    if !words.iter().any(|x| x == &w) {
                        words.push(w);
                    }
                }
            }
        }
    }
    words
}
