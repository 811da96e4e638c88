//! Special-token vocabulary and conversation-to-token rendering.
//!
//! The special tokens cover modality spans (`<img_beg>`, `<img_patch>`,
//! `</img_end>`, video equivalents), the object-tag wrapper
//! (`<tag>`/`</tag>`), and the task expression tokens `<LOC>` and `<SEG>`.
//! They are appended after the base vocabulary in a fixed documented
//! order, so ids are deterministic across runs.
//!
//! The base tokenizer is a toy word tokenizer with four reserved
//! structural tokens (`<unk>`, turn-role markers, and a turn terminator);
//! rendering records where patch tokens, `<SEG>`, and `<LOC>` land, plus
//! the loss mask (true exactly on assistant-turn tokens).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Reserved base-vocabulary ids. These are ordinary vocabulary entries
/// (not Table-style special tokens); they delimit conversation structure.
pub const UNK_ID: u32 = 0;
pub const USER_MARK_ID: u32 = 1;
pub const ASSISTANT_MARK_ID: u32 = 2;
pub const TURN_END_ID: u32 = 3;
pub const N_RESERVED: usize = 4;

pub const UNK_STR: &str = "<unk>";
pub const USER_MARK_STR: &str = "<|user|>";
pub const ASSISTANT_MARK_STR: &str = "<|assistant|>";
pub const TURN_END_STR: &str = "<|end|>";

/// In-text placeholders consumed by the renderer.
pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const VIDEO_PLACEHOLDER: &str = "<video>";

/// Special-token strings in their fixed append order.
pub const SPECIAL_TOKEN_STRINGS: [&str; 10] = [
    "<img_beg>",
    "<img_patch>",
    "</img_end>",
    "<vid_beg>",
    "<vid_patch>",
    "</vid_end>",
    "<tag>",
    "</tag>",
    "<LOC>",
    "<SEG>",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VisualKind {
    Image,
    Video,
}

/// The renderer's view of one sample: at most one visual input plus
/// alternating user/assistant turns.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub visual: Option<VisualKind>,
    pub turns: Vec<Turn>,
}

/// Ids for the ten special tokens plus the patch-count configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpecialTokenTable {
    pub img_beg: u32,
    pub img_patch: u32,
    pub img_end: u32,
    pub vid_beg: u32,
    pub vid_patch: u32,
    pub vid_end: u32,
    pub tag_open: u32,
    pub tag_close: u32,
    pub loc: u32,
    pub seg: u32,
    /// Patch tokens per image (256 by default).
    pub n_img_patches: usize,
    /// Video frame count T (8 by default); video spans carry
    /// `n_img_patches + n_frames` patch tokens.
    pub n_frames: usize,
}

pub const DEFAULT_N_IMG_PATCHES: usize = 256;
pub const DEFAULT_N_FRAMES: usize = 8;

impl SpecialTokenTable {
    pub const COUNT: usize = 10;

    /// Ids assigned sequentially after the base vocabulary, in the fixed
    /// order of [`SPECIAL_TOKEN_STRINGS`].
    pub fn new(base_vocab_len: usize, n_img_patches: usize, n_frames: usize) -> Self {
        let b = base_vocab_len as u32;
        SpecialTokenTable {
            img_beg: b,
            img_patch: b + 1,
            img_end: b + 2,
            vid_beg: b + 3,
            vid_patch: b + 4,
            vid_end: b + 5,
            tag_open: b + 6,
            tag_close: b + 7,
            loc: b + 8,
            seg: b + 9,
            n_img_patches,
            n_frames,
        }
    }

    pub fn with_defaults(base_vocab_len: usize) -> Self {
        Self::new(base_vocab_len, DEFAULT_N_IMG_PATCHES, DEFAULT_N_FRAMES)
    }

    pub fn ids(&self) -> [u32; Self::COUNT] {
        [
            self.img_beg,
            self.img_patch,
            self.img_end,
            self.vid_beg,
            self.vid_patch,
            self.vid_end,
            self.tag_open,
            self.tag_close,
            self.loc,
            self.seg,
        ]
    }

    /// Checks distinctness and disjointness from the base vocabulary.
    pub fn validate(&self, base_vocab_len: usize) -> Result<(), RenderError> {
        let ids = self.ids();
        for (i, &a) in ids.iter().enumerate() {
            if (a as usize) < base_vocab_len {
                return Err(RenderError::BadTable);
            }
            for &b in ids.iter().skip(i + 1) {
                if a == b {
                    return Err(RenderError::BadTable);
                }
            }
        }
        Ok(())
    }

    pub fn string_of(&self, id: u32) -> Option<&'static str> {
        let ids = self.ids();
        ids.iter()
            .position(|&x| x == id)
            .map(|i| SPECIAL_TOKEN_STRINGS[i])
    }

    /// `<img_beg>`, n_img_patches x `<img_patch>`, `</img_end>`.
    pub fn render_image_span(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.n_img_patches + 2);
        out.push(self.img_beg);
        out.extend(core::iter::repeat(self.img_patch).take(self.n_img_patches));
        out.push(self.img_end);
        out
    }

    /// `<vid_beg>`, (n_img_patches + n_frames) x `<vid_patch>`, `</vid_end>`.
    pub fn render_video_span(&self) -> Vec<u32> {
        let n = self.n_img_patches + self.n_frames;
        let mut out = Vec::with_capacity(n + 2);
        out.push(self.vid_beg);
        out.extend(core::iter::repeat(self.vid_patch).take(n));
        out.push(self.vid_end);
        out
    }

    /// Patch-token count for a modality (what the projector must supply).
    pub fn patch_count(&self, kind: VisualKind) -> usize {
        match kind {
            VisualKind::Image => self.n_img_patches,
            VisualKind::Video => self.n_img_patches + self.n_frames,
        }
    }

    pub fn is_visual_token(&self, id: u32) -> bool {
        id == self.img_beg
            || id == self.img_patch
            || id == self.img_end
            || id == self.vid_beg
            || id == self.vid_patch
            || id == self.vid_end
    }
}

/// A rendered token sequence with recorded task-token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    pub token_ids: Vec<u32>,
    /// (start, length) over *patch-token* positions, delimiters excluded.
    pub visual_span: Option<(usize, usize)>,
    pub seg_positions: Vec<usize>,
    pub loc_positions: Vec<usize>,
    /// True exactly where the LM loss applies (assistant-turn tokens).
    pub loss_mask: Vec<bool>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Count of visual tokens including the begin/end delimiters
    /// (258 for a default image span, 2 + 256 + T for video).
    pub fn visual_token_count(&self) -> usize {
        match self.visual_span {
            Some((_, len)) => len + 2,
            None => 0,
        }
    }

    /// Structural invariants: recorded positions hold the right ids, the
    /// loss mask is off at visual positions, patch counts are all-or-nothing.
    pub fn validate(&self, table: &SpecialTokenTable) -> Result<(), RenderError> {
        if self.loss_mask.len() != self.token_ids.len() {
            return Err(RenderError::BadLayout);
        }
        for &p in &self.seg_positions {
            if self.token_ids.get(p) != Some(&table.seg) {
                return Err(RenderError::BadLayout);
            }
        }
        for &p in &self.loc_positions {
            if self.token_ids.get(p) != Some(&table.loc) {
                return Err(RenderError::BadLayout);
            }
        }
        let n_img = self.token_ids.iter().filter(|&&t| t == table.img_patch).count();
        if n_img != 0 && n_img != table.n_img_patches {
            return Err(RenderError::BadLayout);
        }
        let n_vid = self.token_ids.iter().filter(|&&t| t == table.vid_patch).count();
        if n_vid != 0 && n_vid != table.n_img_patches + table.n_frames {
            return Err(RenderError::BadLayout);
        }
        if let Some((start, len)) = self.visual_span {
            for p in start..start + len {
                if self.loss_mask[p] {
                    return Err(RenderError::BadLayout);
                }
                let id = self.token_ids[p];
                if id != table.img_patch && id != table.vid_patch {
                    return Err(RenderError::BadLayout);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RenderError {
    /// An angle-bracketed chunk that is neither a known marker nor a
    /// substituted placeholder, e.g. a leftover `<class>`.
    UnknownPlaceholder(String),
    /// Sequence exceeds the configured token limit.
    TooLong { len: usize, limit: usize },
    EmptyTurns,
    /// Turns must alternate user/assistant starting with user.
    NonAlternating,
    /// `<SEG>`/`<LOC>`/`<tag>` may only appear in assistant turns.
    MarkerNotAllowed(String),
    /// A modality placeholder with no matching visual input.
    MissingVisual(String),
    /// Placeholder kind disagrees with the sample's visual kind.
    VisualKindMismatch,
    /// More than one modality placeholder.
    MultipleVisuals,
    BadTable,
    BadLayout,
    /// Decoding hit a malformed special-token span.
    MalformedSpan,
}

impl core::fmt::Display for RenderError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RenderError::UnknownPlaceholder(p) => write!(f, "unknown placeholder {p}"),
            RenderError::TooLong { len, limit } => {
                write!(f, "sequence of {len} tokens exceeds limit {limit}")
            }
            RenderError::EmptyTurns => write!(f, "sample has no turns"),
            RenderError::NonAlternating => {
                write!(f, "turns must alternate user/assistant starting with user")
            }
            RenderError::MarkerNotAllowed(m) => {
                write!(f, "marker {m} not allowed in user turn")
            }
            RenderError::MissingVisual(p) => {
                write!(f, "placeholder {p} without a visual input")
            }
            RenderError::VisualKindMismatch => {
                write!(f, "placeholder kind disagrees with visual input")
            }
            RenderError::MultipleVisuals => write!(f, "more than one modality placeholder"),
            RenderError::BadTable => write!(f, "special token table is inconsistent"),
            RenderError::BadLayout => write!(f, "token layout violates its invariants"),
            RenderError::MalformedSpan => write!(f, "malformed visual token span"),
        }
    }
}

/// Base word vocabulary plus the appended special-token table.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
    table: SpecialTokenTable,
}

impl Vocab {
    /// Builds a vocabulary from content words (deduplicated, order kept);
    /// reserved structural tokens occupy ids 0..4 and special tokens are
    /// appended last.
    pub fn build<I: IntoIterator<Item = String>>(
        content_words: I,
        n_img_patches: usize,
        n_frames: usize,
    ) -> Vocab {
        let mut words: Vec<String> = vec![
            UNK_STR.to_string(),
            USER_MARK_STR.to_string(),
            ASSISTANT_MARK_STR.to_string(),
            TURN_END_STR.to_string(),
        ];
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            index.insert(w.clone(), i as u32);
        }
        for w in content_words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), words.len() as u32);
                words.push(w);
            }
        }
        let table = SpecialTokenTable::new(words.len(), n_img_patches, n_frames);
        Vocab { words, index, table }
    }

    pub fn table(&self) -> &SpecialTokenTable {
        &self.table
    }

    pub fn base_len(&self) -> usize {
        self.words.len()
    }

    /// Base words plus the ten special tokens.
    pub fn total_len(&self) -> usize {
        self.words.len() + SpecialTokenTable::COUNT
    }

    pub fn word_id(&self, w: &str) -> u32 {
        self.index.get(w).copied().unwrap_or(UNK_ID)
    }

    pub fn token_string(&self, id: u32) -> &str {
        if (id as usize) < self.words.len() {
            &self.words[id as usize]
        } else {
            self.table
                .string_of(id)
                .unwrap_or(UNK_STR)
        }
    }

    /// One token string per line, special tokens last in their fixed order.
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = self.words.clone();
        out.extend(SPECIAL_TOKEN_STRINGS.iter().map(|s| s.to_string()));
        out
    }

    /// Inverse of [`Vocab::to_lines`]; the ten trailing lines must be the
    /// special tokens in their fixed order.
    pub fn from_lines(
        lines: &[String],
        n_img_patches: usize,
        n_frames: usize,
    ) -> Result<Vocab, RenderError> {
        if lines.len() < N_RESERVED + SpecialTokenTable::COUNT {
            return Err(RenderError::BadTable);
        }
        let base_len = lines.len() - SpecialTokenTable::COUNT;
        for (i, expect) in SPECIAL_TOKEN_STRINGS.iter().enumerate() {
            if lines[base_len + i] != *expect {
                return Err(RenderError::BadTable);
            }
        }
        let expected_reserved = [UNK_STR, USER_MARK_STR, ASSISTANT_MARK_STR, TURN_END_STR];
        for (i, expect) in expected_reserved.iter().enumerate() {
            if lines[i] != *expect {
                return Err(RenderError::BadTable);
            }
        }
        let words: Vec<String> = lines[..base_len].to_vec();
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            index.insert(w.clone(), i as u32);
        }
        let table = SpecialTokenTable::new(base_len, n_img_patches, n_frames);
        Ok(Vocab { words, index, table })
    }
}

/// A lexed fragment of turn text.
#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Word(String),
    TagOpen,
    TagClose,
    Seg,
    Loc,
    ImagePlaceholder,
    VideoPlaceholder,
}

/// Splits text into words, single symbols, and recognized markers.
/// Any other `<...>` chunk is an unsubstituted placeholder.
fn lex(text: &str) -> Result<Vec<Piece>, RenderError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '<' {
            let mut j = i + 1;
            while j < chars.len() && chars[j] != '>' && j - i < 32 {
                j += 1;
            }
            if j >= chars.len() || chars[j] != '>' {
                return Err(RenderError::UnknownPlaceholder(
                    chars[i..].iter().collect(),
                ));
            }
            let chunk: String = chars[i..=j].iter().collect();
            let piece = match chunk.as_str() {
                "<tag>" => Piece::TagOpen,
                "</tag>" => Piece::TagClose,
                "<SEG>" => Piece::Seg,
                "<LOC>" => Piece::Loc,
                IMAGE_PLACEHOLDER => Piece::ImagePlaceholder,
                VIDEO_PLACEHOLDER => Piece::VideoPlaceholder,
                _ => return Err(RenderError::UnknownPlaceholder(chunk)),
            };
            out.push(piece);
            i = j + 1;
            continue;
        }
        if c.is_alphanumeric() || c == '_' || c == '\'' {
            let mut j = i;
            while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_' || chars[j] == '\'')
            {
                j += 1;
            }
            out.push(Piece::Word(chars[i..j].iter().collect()));
            i = j;
            continue;
        }
        out.push(Piece::Word(c.to_string()));
        i += 1;
    }
    Ok(out)
}

/// Collects the plain word/symbol tokens of a text, skipping any
/// angle-bracketed marker or placeholder. Used for vocabulary building.
pub fn extract_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '<' {
            let mut j = i + 1;
            while j < chars.len() && chars[j] != '>' && j - i < 32 {
                j += 1;
            }
            i = if j < chars.len() && chars[j] == '>' { j + 1 } else { i + 1 };
            continue;
        }
        if c.is_alphanumeric() || c == '_' || c == '\'' {
            let mut j = i;
            while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_' || chars[j] == '\'')
            {
                j += 1;
            }
            out.push(chars[i..j].iter().collect());
            i = j;
            continue;
        }
        out.push(c.to_string());
        i += 1;
    }
    out
}

/// Renders a conversation into a [`TokenLayout`].
///
/// Sequence order: optional visual span, then for each turn a role marker,
/// the turn tokens, and a terminator. `<SEG>`/`<LOC>`/`<tag>` are only
/// legal in assistant turns; modality placeholders are consumed from user
/// turns (the span at the start stands in for them).
pub fn render_sample(
    conv: &Conversation,
    vocab: &Vocab,
    token_limit: Option<usize>,
) -> Result<TokenLayout, RenderError> {
    render_inner(conv, vocab, token_limit, false)
}

/// Renders a generation prompt: the final turn must be a user turn and an
/// assistant role marker is appended so decoding starts inside the
/// assistant turn. The loss mask is all false.
pub fn render_prompt(
    conv: &Conversation,
    vocab: &Vocab,
    token_limit: Option<usize>,
) -> Result<TokenLayout, RenderError> {
    render_inner(conv, vocab, token_limit, true)
}

fn render_inner(
    conv: &Conversation,
    vocab: &Vocab,
    token_limit: Option<usize>,
    as_prompt: bool,
) -> Result<TokenLayout, RenderError> {
    if conv.turns.is_empty() {
        return Err(RenderError::EmptyTurns);
    }
    for (i, turn) in conv.turns.iter().enumerate() {
        let expect = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if turn.role != expect {
            return Err(RenderError::NonAlternating);
        }
    }
    if as_prompt && conv.turns.last().map(|t| t.role) != Some(Role::User) {
        return Err(RenderError::NonAlternating);
    }

    let table = vocab.table();
    let mut ids: Vec<u32> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    let mut visual_span = None;

    if let Some(kind) = conv.visual {
        let span = match kind {
            VisualKind::Image => table.render_image_span(),
            VisualKind::Video => table.render_video_span(),
        };
        visual_span = Some((1, span.len() - 2));
        mask.extend(core::iter::repeat(false).take(span.len()));
        ids.extend(span);
    }

    let mut seg_positions = Vec::new();
    let mut loc_positions = Vec::new();
    let mut saw_placeholder = false;

    for turn in &conv.turns {
        let (mark, in_assistant) = match turn.role {
            Role::User => (USER_MARK_ID, false),
            Role::Assistant => (ASSISTANT_MARK_ID, true),
        };
        ids.push(mark);
        mask.push(false);
        for piece in lex(&turn.text)? {
            match piece {
                Piece::Word(w) => {
                    ids.push(vocab.word_id(&w));
                    mask.push(in_assistant);
                }
                Piece::ImagePlaceholder | Piece::VideoPlaceholder => {
                    let want = if piece == Piece::ImagePlaceholder {
                        VisualKind::Image
                    } else {
                        VisualKind::Video
                    };
                    let ph = match want {
                        VisualKind::Image => IMAGE_PLACEHOLDER,
                        VisualKind::Video => VIDEO_PLACEHOLDER,
                    };
                    if in_assistant {
                        return Err(RenderError::MarkerNotAllowed(ph.to_string()));
                    }
                    match conv.visual {
                        None => return Err(RenderError::MissingVisual(ph.to_string())),
                        Some(k) if k != want => return Err(RenderError::VisualKindMismatch),
                        Some(_) => {}
                    }
                    if saw_placeholder {
                        return Err(RenderError::MultipleVisuals);
                    }
                    saw_placeholder = true;
                    // Consumed: the span at the start of the sequence
                    // stands in for the placeholder.
                }
                Piece::TagOpen | Piece::TagClose | Piece::Seg | Piece::Loc => {
                    let (id, name) = match piece {
                        Piece::TagOpen => (table.tag_open, "<tag>"),
                        Piece::TagClose => (table.tag_close, "</tag>"),
                        Piece::Seg => (table.seg, "<SEG>"),
                        Piece::Loc => (table.loc, "<LOC>"),
                        _ => unreachable!(),
                    };
                    if !in_assistant {
                        return Err(RenderError::MarkerNotAllowed(name.to_string()));
                    }
                    if id == table.seg {
                        seg_positions.push(ids.len());
                    } else if id == table.loc {
                        loc_positions.push(ids.len());
                    }
                    ids.push(id);
                    mask.push(true);
                }
            }
        }
        ids.push(TURN_END_ID);
        mask.push(in_assistant);
    }

    if as_prompt {
        ids.push(ASSISTANT_MARK_ID);
        mask.push(false);
    }

    if let Some(limit) = token_limit {
        if ids.len() > limit {
            return Err(RenderError::TooLong { len: ids.len(), limit });
        }
    }

    Ok(TokenLayout {
        token_ids: ids,
        visual_span,
        seg_positions,
        loc_positions,
        loss_mask: mask,
    })
}

/// Inverse of [`render_sample`]: reconstructs a conversation whose
/// re-rendering reproduces the same layout (text is space-joined, which
/// the lexer normalizes away).
pub fn decode_layout(layout: &TokenLayout, vocab: &Vocab) -> Result<Conversation, RenderError> {
    let table = vocab.table();
    let ids = &layout.token_ids;
    let mut i = 0;
    let mut visual = None;

    if let Some(&first) = ids.first() {
        if first == table.img_beg || first == table.vid_beg {
            let (patch, end, kind, count) = if first == table.img_beg {
                (table.img_patch, table.img_end, VisualKind::Image, table.n_img_patches)
            } else {
                (
                    table.vid_patch,
                    table.vid_end,
                    VisualKind::Video,
                    table.n_img_patches + table.n_frames,
                )
            };
            i = 1;
            let mut seen = 0;
            while i < ids.len() && ids[i] == patch {
                seen += 1;
                i += 1;
            }
            if seen != count || ids.get(i) != Some(&end) {
                return Err(RenderError::MalformedSpan);
            }
            i += 1;
            visual = Some(kind);
        }
    }

    let mut turns: Vec<Turn> = Vec::new();
    while i < ids.len() {
        let role = match ids[i] {
            USER_MARK_ID => Role::User,
            ASSISTANT_MARK_ID => Role::Assistant,
            _ => return Err(RenderError::MalformedSpan),
        };
        i += 1;
        let mut words: Vec<String> = Vec::new();
        // A placeholder is re-inserted at the head of the first user turn
        // so that re-rendering consumes it the same way.
        if role == Role::User && turns.iter().all(|t| t.role != Role::User) {
            if let Some(kind) = visual {
                words.push(
                    match kind {
                        VisualKind::Image => IMAGE_PLACEHOLDER,
                        VisualKind::Video => VIDEO_PLACEHOLDER,
                    }
                    .to_string(),
                );
            }
        }
        let mut closed = false;
        while i < ids.len() {
            let id = ids[i];
            if id == TURN_END_ID {
                i += 1;
                closed = true;
                break;
            }
            words.push(vocab.token_string(id).to_string());
            i += 1;
        }
        // A trailing assistant marker with no terminator is a generation
        // prompt; surface it as an (empty) open turn only if nonempty.
        if !closed && words.is_empty() && role == Role::Assistant {
            break;
        }
        turns.push(Turn {
            role,
            text: words.join(" "),
        });
    }
    Ok(Conversation { visual, turns })
}
