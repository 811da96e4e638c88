//! Dataset schema and file formats: line-delimited sample records with
//! inline RLE masks, PNG image IO, and a small raw container for
//! pre-extracted video frames.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use uvlm_core::encoders::RgbImage;
use uvlm_core::heads::NormalizedBox;
use uvlm_core::mask::{rle_decode, BinaryMask, RleMask};
use uvlm_core::tokens::{Conversation, Turn, VisualKind};

pub const DATASET_FORMAT: &str = "uvlm-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("bad dataset header in {path}: {message}")]
    Header { path: PathBuf, message: String },
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("template error: {0}")]
    Template(String),
    #[error("bad image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Captioning,
    Vqa,
    Res,
    SemanticSeg,
    Salient,
    Rec,
    VideoCaption,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Captioning,
        TaskKind::Vqa,
        TaskKind::Res,
        TaskKind::SemanticSeg,
        TaskKind::Salient,
        TaskKind::Rec,
        TaskKind::VideoCaption,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Captioning => "captioning",
            TaskKind::Vqa => "vqa",
            TaskKind::Res => "res",
            TaskKind::SemanticSeg => "semantic_seg",
            TaskKind::Salient => "salient",
            TaskKind::Rec => "rec",
            TaskKind::VideoCaption => "video_caption",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    /// Stage-I alignment trains on captioning data only.
    pub fn is_captioning(&self) -> bool {
        matches!(self, TaskKind::Captioning | TaskKind::VideoCaption)
    }

    pub fn needs_mask(&self) -> bool {
        matches!(self, TaskKind::Res | TaskKind::SemanticSeg | TaskKind::Salient)
    }

    pub fn needs_box(&self) -> bool {
        matches!(self, TaskKind::Rec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualRef {
    pub kind: VisualKind,
    /// Path relative to the dataset root.
    pub path: String,
}

/// One multi-turn instruction sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub id: String,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_ref: Option<VisualRef>,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_masks: Vec<RleMask>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_boxes: Vec<NormalizedBox>,
}

impl ConversationSample {
    pub fn conversation(&self) -> Conversation {
        Conversation {
            visual: self.visual_ref.as_ref().map(|v| v.kind),
            turns: self.turns.clone(),
        }
    }

    fn assistant_marker_count(&self, marker: &str) -> usize {
        self.turns
            .iter()
            .filter(|t| t.role == uvlm_core::tokens::Role::Assistant)
            .map(|t| t.text.matches(marker).count())
            .sum()
    }

    /// Schema invariants: mask/box-task samples carry targets and target
    /// counts match the `<SEG>`/`<LOC>` occurrences in assistant text.
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: &str| {
            Err(DataError::InvalidSample { id: self.id.clone(), reason: reason.to_string() })
        };
        if self.turns.is_empty() {
            return fail("no turns");
        }
        if self.task_kind.needs_mask() && self.target_masks.is_empty() {
            return fail("mask task without target masks");
        }
        if self.task_kind.needs_box() && self.target_boxes.is_empty() {
            return fail("box task without target boxes");
        }
        let n_seg = self.assistant_marker_count("<SEG>");
        if n_seg != self.target_masks.len() {
            return fail(&format!(
                "{} <SEG> markers vs {} target masks",
                n_seg,
                self.target_masks.len()
            ));
        }
        let n_loc = self.assistant_marker_count("<LOC>");
        if n_loc != self.target_boxes.len() {
            return fail(&format!(
                "{} <LOC> markers vs {} target boxes",
                n_loc,
                self.target_boxes.len()
            ));
        }
        for b in &self.target_boxes {
            if !b.is_valid() {
                return fail("invalid target box");
            }
        }
        for m in &self.target_masks {
            if rle_decode(m).is_err() {
                return fail("malformed target mask rle");
            }
        }
        Ok(())
    }

    pub fn decoded_masks(&self) -> Result<Vec<BinaryMask>, DataError> {
        self.target_masks
            .iter()
            .map(|m| {
                rle_decode(m).map_err(|e| DataError::InvalidSample {
                    id: self.id.clone(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
}

/// Writes a versioned line-delimited dataset; every sample is validated
/// first so invalid records never reach disk.
pub fn write_dataset(samples: &[ConversationSample], path: &Path) -> Result<(), DataError> {
    for s in samples {
        s.validate()?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader { format: DATASET_FORMAT.into(), version: DATASET_VERSION };
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| DataError::Header { path: path.into(), message: e.to_string() })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| DataError::Parse {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Streaming reader over dataset lines; yields parse errors with their
/// 1-based line number.
pub struct DatasetReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = match lines.next() {
            Some(Ok(l)) => l,
            Some(Err(e)) => return Err(io_err(path)(e)),
            None => {
                return Err(DataError::Header { path: path.into(), message: "empty file".into() })
            }
        };
        let header: DatasetHeader = serde_json::from_str(&header_line)
            .map_err(|e| DataError::Header { path: path.into(), message: e.to_string() })?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(DataError::Header {
                path: path.into(),
                message: format!("unsupported {} v{}", header.format, header.version),
            });
        }
        Ok(DatasetReader { path: path.into(), lines, line_no: 1 })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<ConversationSample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(io_err(&self.path)(e))),
                Ok(line) if line.trim().is_empty() => continue,
                Ok(line) => {
                    return Some(
                        serde_json::from_str::<ConversationSample>(&line)
                            .map_err(|e| DataError::Parse {
                                path: self.path.clone(),
                                line: self.line_no,
                                message: e.to_string(),
                            })
                            .and_then(|s| s.validate().map(|_| s)),
                    )
                }
            }
        }
    }
}

/// Loads and validates a whole dataset file.
pub fn load_dataset(path: &Path) -> Result<Vec<ConversationSample>, DataError> {
    DatasetReader::open(path)?.collect()
}

// ---- image / video IO ----

pub fn load_png(path: &Path) -> Result<RgbImage, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image { path: path.into(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = RgbImage::new(h, w);
    out.data.copy_from_slice(img.as_raw());
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .expect("consistent image buffer");
    buf.save(path)
        .map_err(|e| DataError::Image { path: path.into(), message: e.to_string() })
}

/// Writes a mask as an 8-bit grayscale PNG (255 = foreground).
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<(), DataError> {
    let pixels: Vec<u8> = mask.pixels().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(mask.width as u32, mask.height as u32, pixels)
            .expect("consistent mask buffer");
    buf.save(path)
        .map_err(|e| DataError::Image { path: path.into(), message: e.to_string() })
}

/// Loads a grayscale PNG as a mask (any value > 127 is foreground).
pub fn load_mask_png(path: &Path) -> Result<BinaryMask, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image { path: path.into(), message: e.to_string() })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = BinaryMask::new(h, w);
    for r in 0..h {
        for c in 0..w {
            mask.set(r, c, img.get_pixel(c as u32, r as u32).0[0] > 127);
        }
    }
    Ok(mask)
}

const VIDEO_MAGIC: &[u8; 8] = b"UVLMVID1";

/// Raw pre-extracted frames: magic, T/H/W, then interleaved RGB bytes.
pub fn save_video(frames: &[RgbImage], path: &Path) -> Result<(), DataError> {
    assert!(!frames.is_empty());
    let (h, w) = (frames[0].height, frames[0].width);
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    out.write_all(VIDEO_MAGIC).map_err(io_err(path))?;
    out.write_u32::<LittleEndian>(frames.len() as u32).map_err(io_err(path))?;
    out.write_u32::<LittleEndian>(h as u32).map_err(io_err(path))?;
    out.write_u32::<LittleEndian>(w as u32).map_err(io_err(path))?;
    for f in frames {
        assert_eq!((f.height, f.width), (h, w), "inconsistent frame sizes");
        out.write_all(&f.data).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn load_video(path: &Path) -> Result<Vec<RgbImage>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != VIDEO_MAGIC {
        return Err(DataError::Image { path: path.into(), message: "bad video magic".into() });
    }
    let t = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let h = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let mut frame = RgbImage::new(h, w);
        r.read_exact(&mut frame.data).map_err(io_err(path))?;
        frames.push(frame);
    }
    Ok(frames)
}
