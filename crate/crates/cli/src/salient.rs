//! Salient instruction-data construction: crop the mask's box region,
//! caption the crop, parse an object tag from the caption, and fill a
//! salient template. External captioner/tagger services are pluggable:
//! an HTTP implementation for real endpoints and a deterministic mock
//! for tests and offline builds.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use uvlm_core::encoders::RgbImage;
use uvlm_core::mask::{mask_to_bbox, rle_encode, BinaryMask};
use uvlm_core::rng::SeededRng;
use uvlm_core::tokens::{Role, Turn, VisualKind};

use crate::data::{ConversationSample, DataError, TaskKind, VisualRef};
use crate::templates::TemplatePool;

#[derive(Debug, thiserror::Error)]
#[error("client error: {0}")]
pub struct ClientError(pub String);

pub trait CaptionClient {
    /// Short description of the object depicted in the crop.
    fn caption(&self, crop: &RgbImage) -> Result<String, ClientError>;
}

pub trait TagClient {
    /// Single noun-phrase tag parsed from a description.
    fn tag(&self, description: &str) -> Result<String, ClientError>;
}

/// Deterministic captioner: reports the dominant foreground color and a
/// coarse shape read off the crop's fill ratio.
pub struct MockCaptioner;

impl CaptionClient for MockCaptioner {
    fn caption(&self, crop: &RgbImage) -> Result<String, ClientError> {
        if crop.height == 0 || crop.width == 0 {
            return Err(ClientError("empty crop".into()));
        }
        // Foreground = pixels clearly brighter than the dark background.
        let mut sums = [0u64; 3];
        let mut n_fg = 0u64;
        for r in 0..crop.height {
            for c in 0..crop.width {
                let [pr, pg, pb] = crop.pixel(r, c);
                if pr.max(pg).max(pb) > 60 {
                    sums[0] += pr as u64;
                    sums[1] += pg as u64;
                    sums[2] += pb as u64;
                    n_fg += 1;
                }
            }
        }
        if n_fg == 0 {
            return Err(ClientError("no salient pixels in crop".into()));
        }
        let mean = [sums[0] / n_fg, sums[1] / n_fg, sums[2] / n_fg];
        let color = crate::synth::COLORS
            .iter()
            .min_by_key(|(_, rgb)| {
                rgb.iter()
                    .zip(mean.iter())
                    .map(|(&a, &b)| (a as i64 - b as i64).pow(2))
                    .sum::<i64>()
            })
            .map(|(name, _)| *name)
            .unwrap_or("gray");
        // A tight crop of a disc fills ~pi/4 of its box, a rectangle ~1.
        let fill = n_fg as f64 / (crop.height * crop.width) as f64;
        let shape = if fill > 0.92 { "box" } else { "ball" };
        Ok(format!("a {color} {shape}"))
    }
}

/// Deterministic tagger: strips leading articles from the description.
pub struct MockTagger;

impl TagClient for MockTagger {
    fn tag(&self, description: &str) -> Result<String, ClientError> {
        let words: Vec<&str> = description
            .split_whitespace()
            .skip_while(|w| matches!(w.to_ascii_lowercase().as_str(), "a" | "an" | "the"))
            .collect();
        if words.is_empty() {
            return Err(ClientError("no tag in description".into()));
        }
        Ok(words.join(" "))
    }
}

#[derive(Debug, Serialize)]
struct CaptionRequest {
    image_png_base64: String,
    height: usize,
    width: usize,
}

#[derive(Debug, Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Debug, Serialize)]
struct TagRequest {
    description: String,
}

#[derive(Debug, Deserialize)]
struct TagResponse {
    tag: String,
}

/// POSTs `{"image_png_base64", "height", "width"}` and expects
/// `{"caption"}` back.
pub struct HttpCaptionClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpCaptionClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError(e.to_string()))?;
        Ok(HttpCaptionClient { endpoint: endpoint.to_string(), client })
    }
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>, ClientError> {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .ok_or_else(|| ClientError("bad image buffer".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ClientError(e.to_string()))?;
    Ok(out.into_inner())
}

impl CaptionClient for HttpCaptionClient {
    fn caption(&self, crop: &RgbImage) -> Result<String, ClientError> {
        let body = CaptionRequest {
            image_png_base64: base64::engine::general_purpose::STANDARD.encode(png_bytes(crop)?),
            height: crop.height,
            width: crop.width,
        };
        let resp: CaptionResponse = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| ClientError(e.to_string()))?;
        Ok(resp.caption)
    }
}

/// POSTs `{"description"}` and expects `{"tag"}` back.
pub struct HttpTagClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpTagClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError(e.to_string()))?;
        Ok(HttpTagClient { endpoint: endpoint.to_string(), client })
    }
}

impl TagClient for HttpTagClient {
    fn tag(&self, description: &str) -> Result<String, ClientError> {
        let resp: TagResponse = self
            .client
            .post(&self.endpoint)
            .json(&TagRequest { description: description.to_string() })
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| ClientError(e.to_string()))?;
        Ok(resp.tag)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, backoff_ms: 50 }
    }
}

impl RetryPolicy {
    fn run<T>(&self, mut f: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut last = ClientError("no attempts configured".into());
        for attempt in 0..self.attempts.max(1) {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
            if attempt + 1 < self.attempts {
                std::thread::sleep(Duration::from_millis(self.backoff_ms << attempt));
            }
        }
        Err(last)
    }
}

/// One source record for the pipeline.
#[derive(Debug, Clone)]
pub struct SalientRecord {
    pub id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
    /// Dataset-relative image path recorded in the emitted sample.
    pub image_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipRecord {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildReport {
    pub requested: usize,
    pub built: usize,
    pub skipped: Vec<SkipRecord>,
    pub seed: u64,
}

/// Crops the tight box region of the mask out of the image.
pub fn crop_bbox_region(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, DataError> {
    let bbox = mask_to_bbox(mask).map_err(|e| DataError::InvalidSample {
        id: "<crop>".into(),
        reason: e.to_string(),
    })?;
    let x0 = (bbox.x1 * image.width as f64).round() as usize;
    let x1 = (bbox.x2 * image.width as f64).round() as usize;
    let y0 = (bbox.y1 * image.height as f64).round() as usize;
    let y1 = (bbox.y2 * image.height as f64).round() as usize;
    let mut crop = RgbImage::new(y1 - y0, x1 - x0);
    for r in y0..y1 {
        for c in x0..x1 {
            crop.set_pixel(r - y0, c - x0, image.pixel(r, c));
        }
    }
    Ok(crop)
}

fn sanitize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c == '<' || c == '>' || c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs the construction pipeline over `records`: crop -> caption ->
/// tag -> template. Failing records are retried per policy, then skipped
/// and logged in the report; output order matches input order.
pub fn build_salient15k(
    records: &[SalientRecord],
    captioner: &dyn CaptionClient,
    tagger: &dyn TagClient,
    policy: RetryPolicy,
    seed: u64,
) -> Result<(Vec<ConversationSample>, BuildReport), DataError> {
    let pool = TemplatePool::default_for(TaskKind::Salient).expect("salient pool");
    let mut rng = SeededRng::new(seed);
    let mut samples = Vec::new();
    let mut report = BuildReport {
        requested: records.len(),
        built: 0,
        skipped: Vec::new(),
        seed,
    };
    for record in records {
        let template_seed = rng.next_u64();
        let outcome = (|| -> Result<ConversationSample, String> {
            if record.mask.count_true() == 0 {
                return Err("empty mask".into());
            }
            let crop = crop_bbox_region(&record.image, &record.mask).map_err(|e| e.to_string())?;
            let caption = policy.run(|| captioner.caption(&crop)).map_err(|e| e.to_string())?;
            let caption = sanitize(&caption);
            let tag = policy.run(|| tagger.tag(&caption)).map_err(|e| e.to_string())?;
            let tag = sanitize(&tag);
            if tag.is_empty() {
                return Err("tagger returned an empty tag".into());
            }
            let question = pool.instantiate(None, template_seed).map_err(|e| e.to_string())?;
            let sample = ConversationSample {
                id: record.id.clone(),
                task_kind: TaskKind::Salient,
                visual_ref: Some(VisualRef {
                    kind: VisualKind::Image,
                    path: record.image_path.clone(),
                }),
                turns: vec![
                    Turn { role: Role::User, text: question },
                    Turn {
                        role: Role::Assistant,
                        text: format!("the salient object is <tag>{tag}</tag> <SEG> , {caption} ."),
                    },
                ],
                target_masks: vec![rle_encode(&record.mask)],
                target_boxes: vec![],
            };
            sample.validate().map_err(|e| e.to_string())?;
            Ok(sample)
        })();
        match outcome {
            Ok(sample) => {
                report.built += 1;
                samples.push(sample);
            }
            Err(error) => {
                eprintln!("salient build: skipping {}: {error}", record.id);
                report.skipped.push(SkipRecord { id: record.id.clone(), error });
            }
        }
    }
    Ok((samples, report))
}

/// Loads records from a fixture directory of `<name>.png` +
/// `<name>_mask.png` pairs.
pub fn records_from_dir(dir: &Path) -> Result<Vec<SalientRecord>, DataError> {
    let mut names: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    for entry in entries {
        let entry = entry.map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".png") {
            if !stem.ends_with("_mask") {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    let mut records = Vec::new();
    for stem in names {
        let image = crate::data::load_png(&dir.join(format!("{stem}.png")))?;
        let mask = crate::data::load_mask_png(&dir.join(format!("{stem}_mask.png")))?;
        records.push(SalientRecord {
            id: format!("salient_{stem}"),
            image,
            mask,
            image_path: format!("{stem}.png"),
        });
    }
    Ok(records)
}
