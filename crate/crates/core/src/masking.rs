//! Tube masks for training/inference and block-structured attention masks.
//!
//! Attention follows the temporal-causal rule: prefix tokens (text and the
//! video wrapper) are strictly causal among themselves and never attend
//! visual frames; tokens of frame `t` attend the whole prefix and every token
//! of frames `<= t`, bidirectionally within their own frame. Structural
//! tokens inside a frame block behave as members of that frame.

use thiserror::Error;

use crate::numerics::RngState;
use crate::sequence::{SequenceLayout, TokenFrames};

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("argument out of range: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Spatial Boolean mask reused across all frames of one video.
///
/// `kept[h][w] == true` means the cell stays observed; `false` means it is
/// replaced by the MASK token in every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    pub h: usize,
    pub w: usize,
    pub kept: Vec<bool>,
    pub ratio: f64,
}

impl MaskPattern {
    pub fn all_kept(h: usize, w: usize) -> Self {
        Self { h, w, kept: vec![true; h * w], ratio: 0.0 }
    }

    pub fn is_kept(&self, h: usize, w: usize) -> bool {
        self.kept[h * self.w + w]
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.kept.is_empty() {
            return 0.0;
        }
        self.kept.iter().filter(|&&k| !k).count() as f64 / self.kept.len() as f64
    }

    /// '0'/'1' grid (one row per line), for golden fixtures.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for h in 0..self.h {
            for w in 0..self.w {
                s.push(if self.is_kept(h, w) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

/// Sample one spatial pattern: each cell kept independently with
/// probability `1 - rho`.
pub fn sample_tube_mask(
    grid: (usize, usize),
    rho: f64,
    rng: &mut RngState,
) -> Result<MaskPattern, MaskError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(MaskError::Argument(format!("rho {rho} outside [0, 1]")));
    }
    let (h, w) = grid;
    let kept = (0..h * w).map(|_| rng.next_f64() >= rho).collect();
    Ok(MaskPattern { h, w, kept, ratio: rho })
}

/// Apply one pattern to every frame (the tube property); masked cells carry
/// `mask_id`.
pub fn apply_tube(
    frames: &TokenFrames,
    pattern: &MaskPattern,
    mask_id: u32,
) -> Result<TokenFrames, MaskError> {
    if (pattern.h, pattern.w) != (frames.h, frames.w) {
        return Err(MaskError::Shape(format!(
            "pattern {}x{} vs frames {}x{}",
            pattern.h, pattern.w, frames.h, frames.w
        )));
    }
    let mut out = frames.clone();
    for t in 0..frames.t {
        for h in 0..frames.h {
            for w in 0..frames.w {
                if !pattern.is_kept(h, w) {
                    out.set(t, h, w, mask_id);
                }
            }
        }
    }
    Ok(out)
}

/// Block membership of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockTag {
    /// Strictly causal singleton (text and wrapper tokens), by sequence index.
    Prefix(u32),
    /// Member of a latent frame's bidirectional block.
    Frame(u32),
}

#[derive(Debug, Clone, PartialEq)]
enum MaskRepr {
    Blocks(Vec<BlockTag>),
    /// Row-major n x n attendability bits; for probes and tests.
    Explicit { n: usize, bits: Vec<bool> },
}

/// Attendability structure over a full token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    repr: MaskRepr,
}

impl AttentionMask {
    pub fn from_tags(tags: Vec<BlockTag>) -> Self {
        Self { repr: MaskRepr::Blocks(tags) }
    }

    pub fn explicit(n: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != n * n {
            return Err(MaskError::Shape(format!("{} bits for n={n}", bits.len())));
        }
        Ok(Self { repr: MaskRepr::Explicit { n, bits } })
    }

    /// Diagonal-only mask: every token attends only itself.
    pub fn self_only(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        Self { repr: MaskRepr::Explicit { n, bits } }
    }

    pub fn len(&self) -> usize {
        match &self.repr {
            MaskRepr::Blocks(tags) => tags.len(),
            MaskRepr::Explicit { n, .. } => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tag(&self, index: usize) -> Option<BlockTag> {
        match &self.repr {
            MaskRepr::Blocks(tags) => tags.get(index).copied(),
            MaskRepr::Explicit { .. } => None,
        }
    }

    /// May the query at absolute index `q` attend the key at `k`?
    pub fn attendable(&self, q: usize, k: usize) -> bool {
        match &self.repr {
            MaskRepr::Blocks(tags) => match (tags[q], tags[k]) {
                (BlockTag::Prefix(a), BlockTag::Prefix(b)) => b <= a,
                (BlockTag::Prefix(_), BlockTag::Frame(_)) => false,
                (BlockTag::Frame(_), BlockTag::Prefix(_)) => true,
                (BlockTag::Frame(a), BlockTag::Frame(b)) => b <= a,
            },
            MaskRepr::Explicit { n, bits } => bits[q * n + k],
        }
    }

    /// Materialized n x n Boolean matrix.
    pub fn to_dense(&self) -> Vec<bool> {
        let n = self.len();
        let mut out = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                out[q * n + k] = self.attendable(q, k);
            }
        }
        out
    }
}

/// Temporal-causal mask for a full layout: prefix tokens causal, frame
/// blocks bidirectional within and causal across frames; a trailing token
/// after the last frame joins that frame's block.
pub fn build_temporal_causal_mask(layout: &SequenceLayout) -> AttentionMask {
    let mut tags = Vec::with_capacity(layout.total_len);
    for i in 0..layout.total_len.min(layout.prefix_len) {
        tags.push(BlockTag::Prefix(i as u32));
    }
    for f in &layout.frames {
        for _ in f.start..f.end {
            tags.push(BlockTag::Frame(f.frame_index as u32));
        }
    }
    while tags.len() < layout.total_len {
        let tag = match layout.frames.last() {
            Some(f) => BlockTag::Frame(f.frame_index as u32),
            None => BlockTag::Prefix(tags.len() as u32),
        };
        tags.push(tag);
    }
    AttentionMask::from_tags(tags)
}

/// Lower-triangular attendability over `n_text` tokens.
pub fn build_text_causal_mask(n_text: usize) -> AttentionMask {
    AttentionMask::from_tags((0..n_text).map(|i| BlockTag::Prefix(i as u32)).collect())
}
