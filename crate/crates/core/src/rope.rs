//! Rotary position embedding variants for interleaved text/visual sequences.
//!
//! Every variant shares one frequency ladder `theta_{j+1} = base^(-2j/d)` over
//! pair-channels `j in [0, d/2)` and differs only in which axis each pair
//! encodes and for which modality it is active:
//!
//! * `Vanilla1D`  - every pair rotates by the global sequence index.
//! * `Scheme1`    - first half global (text only), second half t/h/w 2:3:3
//!                  (visual only).
//! * `Scheme2`    - as Scheme1 but the global half also rotates visual tokens.
//! * `MRope`      - contiguous t/h/w blocks in ratio 2:3:3 over all pairs.
//! * `MmRope`     - repeating small groups, each splitting its pairs 2:3:3
//!                  with height/width interleaved, so every axis spans the
//!                  whole frequency ladder.
//!
//! Text tokens always rotate by their global index on every pair that is
//! active for text; visual tokens use scaled 3D latent coordinates offset by
//! the token count preceding the first visual content token.

use thiserror::Error;

use crate::sequence::SequenceLayout;

#[derive(Debug, Error, PartialEq)]
pub enum RopeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: expected vector of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeVariant {
    Vanilla1D,
    Scheme1,
    Scheme2,
    MRope,
    MmRope,
}

impl RopeVariant {
    pub const ALL: [RopeVariant; 5] = [
        RopeVariant::Vanilla1D,
        RopeVariant::Scheme1,
        RopeVariant::Scheme2,
        RopeVariant::MRope,
        RopeVariant::MmRope,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RopeVariant::Vanilla1D => "1d",
            RopeVariant::Scheme1 => "scheme1",
            RopeVariant::Scheme2 => "scheme2",
            RopeVariant::MRope => "mrope",
            RopeVariant::MmRope => "mmrope",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub variant: RopeVariant,
    pub head_dim: usize,
    pub base: f64,
    /// Channels per meta group for `MmRope` (16 -> groups of 8 pairs).
    pub meta_group_channels: usize,
    /// Pair allocation ratio t:h:w. The sum must divide the relevant block.
    pub ratios: (usize, usize, usize),
    /// Integer scale applied to latent (t, h, w) coordinates.
    pub scales: (u32, u32, u32),
}

impl RopeConfig {
    pub fn new(variant: RopeVariant, head_dim: usize) -> Self {
        Self {
            variant,
            head_dim,
            base: 10_000.0,
            meta_group_channels: 16,
            ratios: (2, 3, 3),
            scales: (4, 8, 8),
        }
    }

    pub fn validate(&self) -> Result<(), RopeError> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(RopeError::Config(format!(
                "head_dim {} must be a positive even number",
                self.head_dim
            )));
        }
        if self.base <= 0.0 {
            return Err(RopeError::Config("base must be positive".into()));
        }
        if self.scales.0 < 1 || self.scales.1 < 1 || self.scales.2 < 1 {
            return Err(RopeError::Config("scales must be >= 1".into()));
        }
        let (rt, rh, rw) = self.ratios;
        let rsum = rt + rh + rw;
        if rsum == 0 || rh != rw {
            return Err(RopeError::Config(
                "ratios must be nonzero with symmetric height/width".into(),
            ));
        }
        let pairs = self.head_dim / 2;
        match self.variant {
            RopeVariant::Vanilla1D => Ok(()),
            RopeVariant::MRope => check_split(pairs, rsum, "head_dim/2"),
            RopeVariant::Scheme1 | RopeVariant::Scheme2 => {
                if pairs % 2 != 0 {
                    return Err(RopeError::Config(
                        "schemes 1/2 need an even pair count".into(),
                    ));
                }
                check_split(pairs / 2, rsum, "head_dim/4")
            }
            RopeVariant::MmRope => {
                if self.meta_group_channels == 0
                    || self.meta_group_channels % 2 != 0
                    || self.head_dim % self.meta_group_channels != 0
                {
                    return Err(RopeError::Config(format!(
                        "head_dim {} must be divisible by meta_group_channels {}",
                        self.head_dim, self.meta_group_channels
                    )));
                }
                check_split(self.meta_group_channels / 2, rsum, "meta group pairs")
            }
        }
    }
}

fn check_split(pairs: usize, rsum: usize, what: &str) -> Result<(), RopeError> {
    if pairs % rsum != 0 {
        Err(RopeError::Config(format!(
            "{what} ({pairs} pairs) not divisible by ratio sum {rsum}"
        )))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Global,
    Time,
    Height,
    Width,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Global => "global",
            Axis::Time => "t",
            Axis::Height => "h",
            Axis::Width => "w",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveFor {
    Text,
    Visual,
    Both,
}

impl ActiveFor {
    pub fn name(&self) -> &'static str {
        match self {
            ActiveFor::Text => "text",
            ActiveFor::Visual => "visual",
            ActiveFor::Both => "both",
        }
    }

    fn covers(&self, m: Modality) -> bool {
        matches!(
            (self, m),
            (ActiveFor::Both, _) | (ActiveFor::Text, Modality::Text) | (ActiveFor::Visual, Modality::Visual)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqEntry {
    pub pair_index: usize,
    pub theta: f64,
    pub axis: Axis,
    pub active_for: ActiveFor,
}

/// Per-pair-channel frequency and axis assignment for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub head_dim: usize,
    pub entries: Vec<FreqEntry>,
}

impl FrequencyTable {
    pub fn pairs(&self) -> usize {
        self.entries.len()
    }

    /// Smallest and largest frequency assigned to an axis, if any.
    pub fn axis_span(&self, axis: Axis) -> Option<(f64, f64)> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut seen = false;
        for e in &self.entries {
            if e.axis == axis {
                seen = true;
                min = min.min(e.theta);
                max = max.max(e.theta);
            }
        }
        seen.then_some((min, max))
    }
}

/// Lay out a block of pairs in ratio t:h:w, temporal pairs first and
/// height/width pairs interleaved pairwise.
fn interleaved_axes(pairs: usize, ratios: (usize, usize, usize)) -> Vec<Axis> {
    let unit = pairs / (ratios.0 + ratios.1 + ratios.2);
    let n_t = ratios.0 * unit;
    let n_hw = ratios.1 * unit;
    let mut axes = vec![Axis::Time; n_t];
    for _ in 0..n_hw {
        axes.push(Axis::Height);
        axes.push(Axis::Width);
    }
    axes
}

/// Contiguous t/h/w blocks in ratio t:h:w over `pairs` pair-channels.
fn contiguous_axes(pairs: usize, ratios: (usize, usize, usize)) -> Vec<Axis> {
    let unit = pairs / (ratios.0 + ratios.1 + ratios.2);
    let mut axes = vec![Axis::Time; ratios.0 * unit];
    axes.extend(std::iter::repeat(Axis::Height).take(ratios.1 * unit));
    axes.extend(std::iter::repeat(Axis::Width).take(ratios.2 * unit));
    axes
}

pub fn build_frequency_table(config: &RopeConfig) -> Result<FrequencyTable, RopeError> {
    config.validate()?;
    let d = config.head_dim;
    let pairs = d / 2;
    let theta = |j: usize| config.base.powf(-2.0 * j as f64 / d as f64);

    let assignments: Vec<(Axis, ActiveFor)> = match config.variant {
        RopeVariant::Vanilla1D => (0..pairs).map(|_| (Axis::Global, ActiveFor::Both)).collect(),
        RopeVariant::MRope => contiguous_axes(pairs, config.ratios)
            .into_iter()
            .map(|a| (a, ActiveFor::Both))
            .collect(),
        RopeVariant::Scheme1 | RopeVariant::Scheme2 => {
            let global_active = if config.variant == RopeVariant::Scheme1 {
                ActiveFor::Text
            } else {
                ActiveFor::Both
            };
            let half = pairs / 2;
            let mut v: Vec<(Axis, ActiveFor)> =
                (0..half).map(|_| (Axis::Global, global_active)).collect();
            v.extend(
                contiguous_axes(half, config.ratios)
                    .into_iter()
                    .map(|a| (a, ActiveFor::Visual)),
            );
            v
        }
        RopeVariant::MmRope => {
            let group_pairs = config.meta_group_channels / 2;
            let pattern = interleaved_axes(group_pairs, config.ratios);
            (0..pairs)
                .map(|j| (pattern[j % group_pairs], ActiveFor::Both))
                .collect()
        }
    };

    let entries = assignments
        .into_iter()
        .enumerate()
        .map(|(j, (axis, active_for))| FreqEntry {
            pair_index: j,
            theta: theta(j),
            axis,
            active_for,
        })
        .collect();
    Ok(FrequencyTable { head_dim: d, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Visual,
}

/// Position of one token. Text tokens carry their sequence index in every
/// component; visual tokens carry scaled 3D coordinates plus their raw
/// sequence index in `global` (used by the global-axis channels of Scheme 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub global: u32,
    pub t: u32,
    pub h: u32,
    pub w: u32,
}

impl Position {
    pub fn text(index: u32) -> Self {
        Self { global: index, t: index, h: index, w: index }
    }

    pub fn visual(global: u32, t: u32, h: u32, w: u32) -> Self {
        Self { global, t, h, w }
    }

    pub fn zero() -> Self {
        Self { global: 0, t: 0, h: 0, w: 0 }
    }

    fn component(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Global => self.global as f64,
            Axis::Time => self.t as f64,
            Axis::Height => self.h as f64,
            Axis::Width => self.w as f64,
        }
    }
}

/// Assign a position to every token of a layout.
///
/// Text and structural tokens take their sequence index on all components.
/// A visual content token at latent coordinate (t, h, w) takes
/// `offset + scale * coordinate` per axis, where `offset` is the number of
/// tokens preceding the first visual content token.
pub fn assign_positions(layout: &SequenceLayout, config: &RopeConfig) -> Vec<Position> {
    let offset = layout
        .frames
        .first()
        .map_or(layout.total_len, |f| f.content_start) as u32;
    let (st, sh, sw) = config.scales;
    let mut positions = Vec::with_capacity(layout.total_len);
    for i in 0..layout.total_len {
        positions.push(Position::text(i as u32));
    }
    for f in &layout.frames {
        for h in 0..f.grid.0 {
            for w in 0..f.grid.1 {
                let idx = f.content_position(h, w);
                positions[idx] = Position::visual(
                    idx as u32,
                    offset + st * f.frame_index as u32,
                    offset + sh * h as u32,
                    offset + sw * w as u32,
                );
            }
        }
    }
    positions
}

/// Modality of each token for rotary purposes: content cells are visual,
/// everything else (text, structural) rotates text-style.
pub fn assign_modalities(layout: &SequenceLayout) -> Vec<Modality> {
    let mut m = vec![Modality::Text; layout.total_len];
    for f in &layout.frames {
        for p in f.content_positions() {
            m[p] = Modality::Visual;
        }
    }
    m
}

/// Rotation angle of one pair channel for a position/modality, or `None`
/// when the pair is inactive for the modality.
pub fn pair_angle(entry: &FreqEntry, pos: &Position, modality: Modality) -> Option<f64> {
    if !entry.active_for.covers(modality) {
        return None;
    }
    let component = match modality {
        // Text tokens always rotate by the global index, whatever the label.
        Modality::Text => pos.component(Axis::Global),
        Modality::Visual => pos.component(entry.axis),
    };
    Some(component * entry.theta)
}

pub(crate) fn rotate_f64(
    v: &mut [f64],
    pos: &Position,
    table: &FrequencyTable,
    modality: Modality,
) {
    for e in &table.entries {
        if let Some(angle) = pair_angle(e, pos, modality) {
            let (sin, cos) = angle.sin_cos();
            let a = v[2 * e.pair_index];
            let b = v[2 * e.pair_index + 1];
            v[2 * e.pair_index] = a * cos - b * sin;
            v[2 * e.pair_index + 1] = a * sin + b * cos;
        }
    }
}

/// Transpose (inverse) of [`rotate_f64`]; used by the backward pass.
pub(crate) fn rotate_inverse_f64(
    v: &mut [f64],
    pos: &Position,
    table: &FrequencyTable,
    modality: Modality,
) {
    for e in &table.entries {
        if let Some(angle) = pair_angle(e, pos, modality) {
            let (sin, cos) = angle.sin_cos();
            let a = v[2 * e.pair_index];
            let b = v[2 * e.pair_index + 1];
            v[2 * e.pair_index] = a * cos + b * sin;
            v[2 * e.pair_index + 1] = -a * sin + b * cos;
        }
    }
}

/// Rotate a head-dim vector by the angles selected for (position, modality).
pub fn apply_rotary(
    vector: &[f32],
    pos: &Position,
    table: &FrequencyTable,
    modality: Modality,
) -> Result<Vec<f32>, RopeError> {
    if vector.len() != table.head_dim {
        return Err(RopeError::Dimension { expected: table.head_dim, got: vector.len() });
    }
    let mut v: Vec<f64> = vector.iter().map(|&x| x as f64).collect();
    rotate_f64(&mut v, pos, table, modality);
    Ok(v.into_iter().map(|x| x as f32).collect())
}
