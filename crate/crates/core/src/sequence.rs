//! Interleaved multimodal token layout: codebook partition, the toy text
//! tokenizer, the video-sequence grammar, and the sequence file format.
//!
//! A full sequence is
//! `[metadata + prompt text] [video_start, duration, fps]
//!  {[image_start, h_grid, w_grid, (row, new_line)*H, image_end]}*T [video_end]`
//! where every content row holds `W` visual ids followed by one `new_line`.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error("token {id} at index {index} outside the expected partition: {what}")]
    Partition { id: u32, index: usize, what: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parse error at index {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Vocabulary partition and reserved token ids.
///
/// Text ids occupy `[0, text_size)`, visual content ids
/// `[text_size, text_size + visual_size)`. All structural ids live inside the
/// text partition. Value-carrying ids (duration, fps, grid sizes) are single
/// tokens drawn from reserved ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub text_size: u32,
    pub visual_size: u32,
    pub video_start: u32,
    pub video_end: u32,
    pub image_start: u32,
    pub image_end: u32,
    pub new_line: u32,
    pub mask: u32,
    pub pad: u32,
    pub duration_base: u32,
    pub duration_range: u32,
    pub fps_base: u32,
    pub fps_range: u32,
    pub h_grid_base: u32,
    pub w_grid_base: u32,
    pub grid_range: u32,
}

impl Default for Codebook {
    fn default() -> Self {
        Self {
            text_size: 65_536,
            visual_size: 64_000,
            video_start: 65_000,
            video_end: 65_001,
            image_start: 65_002,
            image_end: 65_003,
            new_line: 65_004,
            mask: 65_005,
            pad: 65_006,
            duration_base: 65_010,
            duration_range: 200,
            fps_base: 65_220,
            fps_range: 100,
            h_grid_base: 65_320,
            w_grid_base: 65_420,
            grid_range: 100,
        }
    }
}

impl Codebook {
    pub fn total(&self) -> u32 {
        self.text_size + self.visual_size
    }

    pub fn visual_base(&self) -> u32 {
        self.text_size
    }

    pub fn is_visual(&self, id: u32) -> bool {
        id >= self.text_size && id < self.total()
    }

    pub fn duration_token(&self, frames: u32) -> u32 {
        self.duration_base + frames.min(self.duration_range - 1)
    }

    pub fn fps_token(&self, fps: u32) -> u32 {
        self.fps_base + fps.min(self.fps_range - 1)
    }

    pub fn h_grid_token(&self, h: u32) -> u32 {
        self.h_grid_base + h.min(self.grid_range - 1)
    }

    pub fn w_grid_token(&self, w: u32) -> u32 {
        self.w_grid_base + w.min(self.grid_range - 1)
    }

    /// True for any reserved structural/value id.
    pub fn is_structural(&self, id: u32) -> bool {
        [
            self.video_start,
            self.video_end,
            self.image_start,
            self.image_end,
            self.new_line,
            self.mask,
            self.pad,
        ]
        .contains(&id)
            || (id >= self.duration_base && id < self.duration_base + self.duration_range)
            || (id >= self.fps_base && id < self.fps_base + self.fps_range)
            || (id >= self.h_grid_base && id < self.h_grid_base + self.grid_range)
            || (id >= self.w_grid_base && id < self.w_grid_base + self.grid_range)
    }

    /// Every reserved id, for distinctness checks.
    pub fn reserved_ids(&self) -> Vec<u32> {
        let mut ids = vec![
            self.video_start,
            self.video_end,
            self.image_start,
            self.image_end,
            self.new_line,
            self.mask,
            self.pad,
        ];
        ids.extend(self.duration_base..self.duration_base + self.duration_range);
        ids.extend(self.fps_base..self.fps_base + self.fps_range);
        ids.extend(self.h_grid_base..self.h_grid_base + self.grid_range);
        ids.extend(self.w_grid_base..self.w_grid_base + self.grid_range);
        ids
    }
}

const WORD_BASE: u32 = 45_000;
const NUM_BASE: u32 = 50_000;
const NUM_RANGE: u32 = 8_192;
const UNK_BASE: u32 = 60_000;
const UNK_RANGE: u32 = 4_000;

/// Fixed word list covering the metadata template and the synthetic captions.
const VOCAB: &[&str] = &[
    "Generate", "a", "video", "with", "resolution", "of", "x", ",", ":", "consisting",
    "frames", "at", "per", "second", "according", "to", "the", "following", "prompt",
    "image", "sprite", "moving", "still", "up", "down", "left", "right", "upleft",
    "upright", "downleft", "downright", "background",
];

/// Word-level toy tokenizer over the text partition.
///
/// Known words and decimal numerals map bijectively to reserved id ranges, so
/// any text produced by this crate round-trips exactly. Unknown words fall
/// into deterministic hash buckets and decode as placeholders.
pub struct TextTokenizer {
    index: HashMap<&'static str, u32>,
}

impl Default for TextTokenizer {
    fn default() -> Self {
        let index = VOCAB
            .iter()
            .enumerate()
            .map(|(i, &w)| (w, i as u32))
            .collect();
        Self { index }
    }
}

impl TextTokenizer {
    pub fn encode_word(&self, word: &str) -> u32 {
        if let Ok(n) = word.parse::<u32>() {
            if n < NUM_RANGE && !word.starts_with('0') || word == "0" {
                return NUM_BASE + n;
            }
        }
        if let Some(&i) = self.index.get(word) {
            return WORD_BASE + i;
        }
        UNK_BASE + fnv1a(word) % UNK_RANGE
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.encode_word(w)).collect()
    }

    pub fn decode_word(&self, id: u32) -> String {
        if (NUM_BASE..NUM_BASE + NUM_RANGE).contains(&id) {
            return (id - NUM_BASE).to_string();
        }
        if (WORD_BASE..WORD_BASE + VOCAB.len() as u32).contains(&id) {
            return VOCAB[(id - WORD_BASE) as usize].to_string();
        }
        if (UNK_BASE..UNK_BASE + UNK_RANGE).contains(&id) {
            return format!("<unk{}>", id - UNK_BASE);
        }
        format!("<id{id}>")
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.decode_word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn fnv1a(s: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in s.as_bytes() {
        h ^= *b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Pixel-space metadata rendered into the text prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoMeta {
    pub height_px: u32,
    pub width_px: u32,
    pub frames: u32,
    pub fps: u32,
}

impl VideoMeta {
    /// Latent dimensions under the fixed 8x8x4 compression.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let t = if self.frames == 0 { 0 } else { (self.frames as usize - 1) / 4 + 1 };
        (t, self.height_px as usize / 8, self.width_px as usize / 8)
    }

    /// Metadata for a latent grid, inverting [`Self::latent_dims`].
    pub fn from_latent(t: usize, h: usize, w: usize, fps: u32) -> Self {
        Self {
            height_px: (h * 8) as u32,
            width_px: (w * 8) as u32,
            frames: if t == 0 { 0 } else { ((t - 1) * 4 + 1) as u32 },
            fps,
        }
    }

    /// Canonical metadata text, tokenized word-by-word.
    pub fn template_words(&self) -> String {
        format!(
            "Generate a video with a resolution of {} x {} , consisting of {} frames at {} frames per second , according to the following prompt :",
            self.height_px, self.width_px, self.frames, self.fps
        )
    }
}

/// A `T x H x W` grid of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFrames {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    ids: Vec<u32>,
}

impl TokenFrames {
    pub fn new(t: usize, h: usize, w: usize, ids: Vec<u32>) -> Result<Self, SequenceError> {
        if ids.len() != t * h * w {
            return Err(SequenceError::Shape(format!(
                "expected {} ids for {}x{}x{}, got {}",
                t * h * w,
                t,
                h,
                w,
                ids.len()
            )));
        }
        Ok(Self { t, h, w, ids })
    }

    pub fn from_rows(rows: &[Vec<Vec<u32>>]) -> Result<Self, SequenceError> {
        let t = rows.len();
        let h = rows.first().map_or(0, |f| f.len());
        let w = rows.first().and_then(|f| f.first()).map_or(0, |r| r.len());
        let mut ids = Vec::with_capacity(t * h * w);
        for (ti, frame) in rows.iter().enumerate() {
            if frame.len() != h {
                return Err(SequenceError::Shape(format!(
                    "frame {ti} has {} rows, expected {h}",
                    frame.len()
                )));
            }
            for (ri, row) in frame.iter().enumerate() {
                if row.len() != w {
                    return Err(SequenceError::Shape(format!(
                        "frame {ti} row {ri} has {} ids, expected {w}",
                        row.len()
                    )));
                }
                ids.extend_from_slice(row);
            }
        }
        Self::new(t, h, w, ids)
    }

    pub fn get(&self, t: usize, h: usize, w: usize) -> u32 {
        self.ids[(t * self.h + h) * self.w + w]
    }

    pub fn set(&mut self, t: usize, h: usize, w: usize, id: u32) {
        self.ids[(t * self.h + h) * self.w + w] = id;
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        &self.ids[t * self.h * self.w..(t + 1) * self.h * self.w]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// Span of one latent frame inside a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSpan {
    pub frame_index: usize,
    /// First token of the frame block (`image_start` in the real grammar).
    pub start: usize,
    /// First content token.
    pub content_start: usize,
    /// Latent grid (H, W).
    pub grid: (usize, usize),
    /// Tokens per content row including any trailing structural token.
    pub row_stride: usize,
    /// Exclusive end of the frame block.
    pub end: usize,
}

impl FrameSpan {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn span_len(&self) -> usize {
        self.end - self.start
    }

    /// Sequence index of the content cell at latent coordinate (h, w).
    pub fn content_position(&self, h: usize, w: usize) -> usize {
        self.content_start + h * self.row_stride + w
    }

    /// Latent coordinate of a sequence index, if it is a content cell.
    pub fn latent_coord(&self, index: usize) -> Option<(usize, usize)> {
        if index < self.content_start || index >= self.end {
            return None;
        }
        let off = index - self.content_start;
        let h = off / self.row_stride;
        let w = off % self.row_stride;
        if h < self.grid.0 && w < self.grid.1 {
            Some((h, w))
        } else {
            None
        }
    }

    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        let (gh, gw) = self.grid;
        (0..gh).flat_map(move |h| (0..gw).map(move |w| self.content_position(h, w)))
    }
}

/// Structural description of a full sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    /// Metadata + prompt text tokens occupy `[0, text_len)`.
    pub text_len: usize,
    /// Tokens preceding the first frame block (text plus any video wrapper).
    pub prefix_len: usize,
    pub frames: Vec<FrameSpan>,
    pub total_len: usize,
}

impl SequenceLayout {
    pub fn text_span(&self) -> Range<usize> {
        0..self.text_len
    }

    pub fn latent_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.frames.first().map_or(0, FrameSpan::tokens_per_frame)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| f.grid)
    }

    /// A layout without structural tokens: text immediately followed by
    /// densely packed frames. Used by tests and micro models.
    pub fn synthetic(text_len: usize, t: usize, grid: (usize, usize)) -> Self {
        let (h, w) = grid;
        let nf = h * w;
        let frames = (0..t)
            .map(|i| FrameSpan {
                frame_index: i,
                start: text_len + i * nf,
                content_start: text_len + i * nf,
                grid,
                row_stride: w,
                end: text_len + (i + 1) * nf,
            })
            .collect();
        Self {
            text_len,
            prefix_len: text_len,
            frames,
            total_len: text_len + t * nf,
        }
    }

    /// Frame index owning a sequence position, if any.
    pub fn frame_of(&self, index: usize) -> Option<usize> {
        self.frames
            .iter()
            .find(|f| index >= f.start && index < f.end)
            .map(|f| f.frame_index)
    }

    /// Latent coordinate of a content position: (frame, h, w).
    pub fn content_coord(&self, index: usize) -> Option<(usize, usize, usize)> {
        self.frames.iter().find_map(|f| {
            f.latent_coord(index).map(|(h, w)| (f.frame_index, h, w))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityTag {
    Text,
    Structural,
    Visual,
}

/// Token ids with modality tags and the derived layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    pub ids: Vec<u32>,
    pub tags: Vec<ModalityTag>,
    pub layout: SequenceLayout,
    /// Caption portion of the text span (empty when no caption is present).
    pub caption_range: Range<usize>,
}

/// Expected token count of the visual span for a given layout shape.
pub fn visual_span_len(t: usize, h: usize, w: usize) -> usize {
    4 + t * (3 + h * w + h + 1)
}

/// Build the full interleaved sequence for metadata, prompt and visual grid.
pub fn encode_sequence(
    meta: &VideoMeta,
    prompt_tokens: &[u32],
    frames: &TokenFrames,
    cb: &Codebook,
) -> Result<MultimodalSequence, SequenceError> {
    let mut seq = encode_skeleton(meta, prompt_tokens, frames.t, (frames.h, frames.w), cb)?;
    for (fi, span) in seq.layout.frames.clone().iter().enumerate() {
        for h in 0..frames.h {
            for w in 0..frames.w {
                let id = frames.get(fi, h, w);
                if !cb.is_visual(id) {
                    return Err(SequenceError::Partition {
                        id,
                        index: span.content_position(h, w),
                        what: "visual content must come from the visual partition".into(),
                    });
                }
                seq.ids[span.content_position(h, w)] = id;
            }
        }
    }
    Ok(seq)
}

/// Build the structural sequence with every content cell set to
/// `placeholder`. Generation fills the placeholders frame by frame.
pub fn encode_skeleton(
    meta: &VideoMeta,
    prompt_tokens: &[u32],
    t: usize,
    grid: (usize, usize),
    cb: &Codebook,
) -> Result<MultimodalSequence, SequenceError> {
    let (gh, gw) = grid;
    if t > 0 && (gh == 0 || gw == 0) {
        return Err(SequenceError::Shape(format!("degenerate grid {gh}x{gw}")));
    }
    let tokenizer = TextTokenizer::default();
    let mut ids = tokenizer.encode_text(&meta.template_words());
    let caption_start = ids.len();
    for (i, &p) in prompt_tokens.iter().enumerate() {
        if p >= cb.text_size {
            return Err(SequenceError::Partition {
                id: p,
                index: caption_start + i,
                what: "prompt tokens must come from the text partition".into(),
            });
        }
        ids.push(p);
    }
    let text_len = ids.len();
    let caption_range = caption_start..text_len;

    ids.push(cb.video_start);
    ids.push(cb.duration_token(meta.frames));
    ids.push(cb.fps_token(meta.fps));
    let prefix_len = ids.len();

    let mut frames = Vec::with_capacity(t);
    for fi in 0..t {
        let start = ids.len();
        ids.push(cb.image_start);
        ids.push(cb.h_grid_token(gh as u32));
        ids.push(cb.w_grid_token(gw as u32));
        let content_start = ids.len();
        for _ in 0..gh {
            for _ in 0..gw {
                ids.push(cb.mask);
            }
            ids.push(cb.new_line);
        }
        ids.push(cb.image_end);
        frames.push(FrameSpan {
            frame_index: fi,
            start,
            content_start,
            grid,
            row_stride: gw + 1,
            end: ids.len(),
        });
    }
    ids.push(cb.video_end);

    let layout = SequenceLayout {
        text_len,
        prefix_len,
        frames,
        total_len: ids.len(),
    };
    let tags = derive_tags(&ids, &layout);
    Ok(MultimodalSequence { ids, tags, layout, caption_range })
}

fn derive_tags(ids: &[u32], layout: &SequenceLayout) -> Vec<ModalityTag> {
    let mut tags = vec![ModalityTag::Structural; ids.len()];
    for tag in tags.iter_mut().take(layout.text_len) {
        *tag = ModalityTag::Text;
    }
    for f in &layout.frames {
        for p in f.content_positions() {
            tags[p] = ModalityTag::Visual;
        }
    }
    tags
}

/// Reconstruct the layout of an encoded sequence from its ids alone.
pub fn decode_layout(seq: &MultimodalSequence, cb: &Codebook) -> Result<SequenceLayout, SequenceError> {
    parse_layout(&seq.ids, cb)
}

pub fn parse_layout(ids: &[u32], cb: &Codebook) -> Result<SequenceLayout, SequenceError> {
    let mut pos = 0;
    while pos < ids.len() && !cb.is_structural(ids[pos]) && !cb.is_visual(ids[pos]) {
        pos += 1;
    }
    let text_len = pos;
    let expect = |pos: usize, ok: bool, message: &str| -> Result<(), SequenceError> {
        if ok {
            Ok(())
        } else {
            Err(SequenceError::Parse { index: pos, message: message.into() })
        }
    };
    expect(pos, pos < ids.len() && ids[pos] == cb.video_start, "expected video_start")?;
    pos += 1;
    expect(
        pos,
        pos < ids.len() && (cb.duration_base..cb.duration_base + cb.duration_range).contains(&ids[pos]),
        "expected duration token",
    )?;
    pos += 1;
    expect(
        pos,
        pos < ids.len() && (cb.fps_base..cb.fps_base + cb.fps_range).contains(&ids[pos]),
        "expected fps token",
    )?;
    pos += 1;
    let prefix_len = pos;

    let mut frames = Vec::new();
    let mut grid: Option<(usize, usize)> = None;
    while pos < ids.len() && ids[pos] == cb.image_start {
        let start = pos;
        pos += 1;
        expect(
            pos,
            pos < ids.len() && (cb.h_grid_base..cb.h_grid_base + cb.grid_range).contains(&ids[pos]),
            "expected h_grid token",
        )?;
        let gh = (ids[pos] - cb.h_grid_base) as usize;
        pos += 1;
        expect(
            pos,
            pos < ids.len() && (cb.w_grid_base..cb.w_grid_base + cb.grid_range).contains(&ids[pos]),
            "expected w_grid token",
        )?;
        let gw = (ids[pos] - cb.w_grid_base) as usize;
        pos += 1;
        if let Some(g) = grid {
            expect(start, g == (gh, gw), "frame grid differs from previous frames")?;
        }
        grid = Some((gh, gw));
        let content_start = pos;
        for _ in 0..gh {
            for _ in 0..gw {
                expect(pos, pos < ids.len() && cb.is_visual(ids[pos]), "expected visual content id")?;
                pos += 1;
            }
            expect(pos, pos < ids.len() && ids[pos] == cb.new_line, "expected new_line after row")?;
            pos += 1;
        }
        expect(pos, pos < ids.len() && ids[pos] == cb.image_end, "expected image_end")?;
        pos += 1;
        frames.push(FrameSpan {
            frame_index: frames.len(),
            start,
            content_start,
            grid: (gh, gw),
            row_stride: gw + 1,
            end: pos,
        });
    }
    expect(pos, pos < ids.len() && ids[pos] == cb.video_end, "expected video_end")?;
    pos += 1;
    expect(pos, pos == ids.len(), "trailing tokens after video_end")?;

    Ok(SequenceLayout { text_len, prefix_len, frames, total_len: ids.len() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "at {}: {}", i, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Check every structural invariant; returns all violations found.
pub fn validate_sequence(seq: &MultimodalSequence, cb: &Codebook) -> Vec<Violation> {
    let mut out = Vec::new();
    if seq.ids.len() != seq.tags.len() {
        out.push(Violation {
            index: None,
            message: format!("{} ids but {} tags", seq.ids.len(), seq.tags.len()),
        });
        return out;
    }
    for (i, (&id, &tag)) in seq.ids.iter().zip(&seq.tags).enumerate() {
        let visual = cb.is_visual(id);
        if visual != (tag == ModalityTag::Visual) {
            out.push(Violation {
                index: Some(i),
                message: format!(
                    "id {id} is {} but tagged {:?}",
                    if visual { "visual" } else { "textual" },
                    tag
                ),
            });
        }
        if id >= cb.total() {
            out.push(Violation {
                index: Some(i),
                message: format!("id {id} outside the {}-entry vocabulary", cb.total()),
            });
        }
    }
    match parse_layout(&seq.ids, cb) {
        Ok(layout) => {
            if layout != seq.layout {
                out.push(Violation {
                    index: None,
                    message: "stored layout disagrees with the parsed grammar".into(),
                });
            }
            let (gh, gw) = layout.grid();
            let expected = layout.prefix_len - layout.text_len
                + layout.frames.len() * (3 + gh * gw + gh + 1)
                + 1;
            let actual = layout.total_len - layout.text_len;
            if layout.prefix_len - layout.text_len == 3 && expected != actual {
                out.push(Violation {
                    index: None,
                    message: format!("visual span length {actual}, expected {expected}"),
                });
            }
            let mut grids = layout.frames.iter().map(|f| f.grid);
            if let Some(first) = grids.next() {
                if grids.any(|g| g != first) {
                    out.push(Violation { index: None, message: "frames with differing grids".into() });
                }
            }
        }
        Err(SequenceError::Parse { index, message }) => {
            out.push(Violation { index: Some(index), message });
        }
        Err(e) => out.push(Violation { index: None, message: e.to_string() }),
    }
    out
}

/// Extract the content grid of an encoded sequence.
pub fn extract_frames(seq: &MultimodalSequence) -> TokenFrames {
    let t = seq.layout.latent_frames();
    let (h, w) = seq.layout.grid();
    let mut ids = Vec::with_capacity(t * h * w);
    for f in &seq.layout.frames {
        for p in f.content_positions() {
            ids.push(seq.ids[p]);
        }
    }
    TokenFrames::new(t, h, w, ids).expect("layout-consistent grid")
}

/// Write a sequence in the line-oriented text format:
/// a `#layout T H W text_len` header followed by whitespace-separated ids.
pub fn write_sequence_string(seq: &MultimodalSequence) -> String {
    let (h, w) = seq.layout.grid();
    let mut s = format!(
        "#layout {} {} {} {}\n",
        seq.layout.latent_frames(),
        h,
        w,
        seq.layout.text_len
    );
    let mut line = Vec::new();
    let mut cursor = 0;
    let mut boundaries: Vec<usize> = vec![seq.layout.prefix_len];
    boundaries.extend(seq.layout.frames.iter().map(|f| f.end));
    boundaries.push(seq.layout.total_len);
    boundaries.dedup();
    for &b in &boundaries {
        line.clear();
        for &id in &seq.ids[cursor..b] {
            line.push(id.to_string());
        }
        if !line.is_empty() {
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        cursor = b;
    }
    s
}

pub fn write_sequence_file(path: &Path, seq: &MultimodalSequence) -> Result<(), SequenceError> {
    std::fs::write(path, write_sequence_string(seq)).map_err(|e| SequenceError::Io(e.to_string()))
}

pub fn read_sequence_string(text: &str, cb: &Codebook) -> Result<MultimodalSequence, SequenceError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| SequenceError::Parse { index: 0, message: "empty file".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "#layout" {
        return Err(SequenceError::Parse {
            index: 0,
            message: "expected header `#layout T H W text_len`".into(),
        });
    }
    let parse = |s: &str| -> Result<usize, SequenceError> {
        s.parse().map_err(|_| SequenceError::Parse {
            index: 0,
            message: format!("bad header field {s}"),
        })
    };
    let (t, h, w, text_len) =
        (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?, parse(fields[4])?);

    let mut ids = Vec::new();
    for line in lines {
        for field in line.split_whitespace() {
            let id: u32 = field.parse().map_err(|_| SequenceError::Parse {
                index: ids.len(),
                message: format!("bad token id `{field}`"),
            })?;
            ids.push(id);
        }
    }
    let layout = parse_layout(&ids, cb)?;
    if layout.latent_frames() != t
        || layout.grid() != (h, w) && t > 0
        || layout.text_len != text_len
    {
        return Err(SequenceError::Parse {
            index: 0,
            message: format!(
                "header ({t} {h} {w} {text_len}) disagrees with parsed layout ({} {:?} {})",
                layout.latent_frames(),
                layout.grid(),
                layout.text_len
            ),
        });
    }
    let tags = derive_tags(&ids, &layout);
    let caption_range = layout.text_len..layout.text_len;
    Ok(MultimodalSequence { ids, tags, layout, caption_range })
}

pub fn read_sequence_file(path: &Path, cb: &Codebook) -> Result<MultimodalSequence, SequenceError> {
    let text = std::fs::read_to_string(path).map_err(|e| SequenceError::Io(e.to_string()))?;
    read_sequence_string(&text, cb)
}
