//! Inference forward pass over a token slice against an optional KV cache.

use crate::masking::AttentionMask;
use crate::numerics::Tensor2D;
use crate::rope::{rotate_f64, Modality, Position};

use super::{matvec_f32w, rms_scale, silu, ModelError, ModelState};

/// Per-layer cached key/value rows for one generation session.
///
/// Rows are appended in sequence order and never mutated; row `j` of every
/// layer belongs to the token at absolute sequence index `j`.
#[derive(Debug, Clone)]
pub struct KVCache {
    hidden: usize,
    layers: Vec<LayerKV>,
    len: usize,
}

#[derive(Debug, Clone, Default)]
struct LayerKV {
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KVCache {
    pub fn new(config: &super::ModelConfig) -> Self {
        Self {
            hidden: config.hidden_size,
            layers: (0..config.n_layers).map(|_| LayerKV::default()).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn key_row(&self, layer: usize, j: usize) -> &[f64] {
        &self.layers[layer].keys[j * self.hidden..(j + 1) * self.hidden]
    }

    fn value_row(&self, layer: usize, j: usize) -> &[f64] {
        &self.layers[layer].values[j * self.hidden..(j + 1) * self.hidden]
    }

    fn append(&mut self, slice: SliceKV) {
        for (l, (k, v)) in self.layers.iter_mut().zip(slice.per_layer) {
            l.keys.extend_from_slice(&k);
            l.values.extend_from_slice(&v);
        }
        self.len += slice.rows;
    }
}

struct SliceKV {
    rows: usize,
    per_layer: Vec<(Vec<f64>, Vec<f64>)>,
}

enum HeadMode<'a> {
    None,
    All,
    At(&'a [usize]),
}

/// Shared stack evaluation. Returns logits for the requested rows and the
/// slice's per-layer keys/values for optional cache extension.
fn run_stack(
    state: &ModelState,
    tokens: &[u32],
    positions: &[Position],
    modalities: &[Modality],
    mask: &AttentionMask,
    cache: Option<&KVCache>,
    head: HeadMode,
) -> Result<(Option<Tensor2D>, SliceKV), ModelError> {
    let cfg = &state.config;
    let n = tokens.len();
    let h = cfg.hidden_size;
    let dh = cfg.head_dim;
    let cache_len = cache.map_or(0, KVCache::len);

    if positions.len() != n || modalities.len() != n {
        return Err(ModelError::Dimension(format!(
            "{n} tokens with {} positions / {} modalities",
            positions.len(),
            modalities.len()
        )));
    }
    if let Some(c) = cache {
        if c.layers.len() != cfg.n_layers || c.hidden != h {
            return Err(ModelError::Session("cache shape does not match this model".into()));
        }
    }
    if mask.len() < cache_len + n {
        return Err(ModelError::Session(format!(
            "mask covers {} tokens but session has {} cached + {} new",
            mask.len(),
            cache_len,
            n
        )));
    }

    // Embedding lookup.
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (i, &id) in tokens.iter().enumerate() {
        if id as usize >= cfg.vocab_total() {
            return Err(ModelError::Session(format!(
                "token id {id} at slice index {i} outside the {}-entry vocabulary",
                cfg.vocab_total()
            )));
        }
        x.push(
            state
                .embedding
                .row(id as usize)
                .iter()
                .map(|&v| v as f64)
                .collect(),
        );
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut slice_kv = SliceKV { rows: n, per_layer: Vec::with_capacity(cfg.n_layers) };

    for (li, layer) in state.layers.iter().enumerate() {
        let mut q_rot = vec![0.0f64; n * h];
        let mut k_rot = vec![0.0f64; n * h];
        let mut v_rows = vec![0.0f64; n * h];
        for i in 0..n {
            let r = rms_scale(&x[i], cfg.rmsnorm_eps);
            let normed: Vec<f64> = x[i]
                .iter()
                .zip(&layer.attn_norm)
                .map(|(&v, &g)| v * r * g as f64)
                .collect();
            let mut q = matvec_f32w(&layer.wq, &normed);
            let mut k = matvec_f32w(&layer.wk, &normed);
            let v = matvec_f32w(&layer.wv, &normed);
            for head in 0..cfg.n_heads {
                let s = head * dh;
                qk_norm_rotate(
                    &mut q[s..s + dh],
                    &layer.qk_gain_q,
                    cfg.rmsnorm_eps,
                    &positions[i],
                    modalities[i],
                    state,
                );
                qk_norm_rotate(
                    &mut k[s..s + dh],
                    &layer.qk_gain_k,
                    cfg.rmsnorm_eps,
                    &positions[i],
                    modalities[i],
                    state,
                );
            }
            q_rot[i * h..(i + 1) * h].copy_from_slice(&q);
            k_rot[i * h..(i + 1) * h].copy_from_slice(&k);
            v_rows[i * h..(i + 1) * h].copy_from_slice(&v);
        }

        // Attention with cached keys first, then in-slice keys.
        let mut ctx = vec![0.0f64; n * h];
        let mut scores = vec![0.0f64; cache_len + n];
        for i in 0..n {
            let q_abs = cache_len + i;
            for head in 0..cfg.n_heads {
                let hs = head * dh;
                let q_head = &q_rot[i * h + hs..i * h + hs + dh];
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for j in 0..cache_len + n {
                    if !mask.attendable(q_abs, j) {
                        scores[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    any = true;
                    let k_head = if j < cache_len {
                        let row = cache.unwrap().key_row(li, j);
                        &row[hs..hs + dh]
                    } else {
                        let sj = j - cache_len;
                        &k_rot[sj * h + hs..sj * h + hs + dh]
                    };
                    let s = dot(q_head, k_head) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                if !any {
                    return Err(ModelError::Session(format!(
                        "query at absolute index {q_abs} attends no keys"
                    )));
                }
                let mut denom = 0.0f64;
                for s in scores.iter_mut() {
                    if *s == f64::NEG_INFINITY {
                        *s = 0.0;
                    } else {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                }
                let ctx_head = &mut ctx[i * h + hs..i * h + hs + dh];
                for (j, &p) in scores.iter().enumerate().take(cache_len + n) {
                    if p == 0.0 {
                        continue;
                    }
                    let w = p / denom;
                    let v_head = if j < cache_len {
                        let row = cache.unwrap().value_row(li, j);
                        &row[hs..hs + dh]
                    } else {
                        let sj = j - cache_len;
                        &v_rows[sj * h + hs..sj * h + hs + dh]
                    };
                    for (c, &v) in ctx_head.iter_mut().zip(v_head) {
                        *c += w * v;
                    }
                }
            }
        }

        for i in 0..n {
            let attn_out = matvec_f32w(&layer.wo, &ctx[i * h..(i + 1) * h]);
            for (xi, a) in x[i].iter_mut().zip(&attn_out) {
                *xi += a;
            }
            let r = rms_scale(&x[i], cfg.rmsnorm_eps);
            let normed: Vec<f64> = x[i]
                .iter()
                .zip(&layer.ffn_norm)
                .map(|(&v, &g)| v * r * g as f64)
                .collect();
            let gate = matvec_f32w(&layer.w_gate, &normed);
            let up = matvec_f32w(&layer.w_up, &normed);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let down = matvec_f32w(&layer.w_down, &act);
            for (xi, d) in x[i].iter_mut().zip(&down) {
                *xi += d;
            }
        }

        slice_kv.per_layer.push((
            k_rot,
            v_rows,
        ));
    }

    for (i, xi) in x.iter().enumerate() {
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numeric(format!(
                "non-finite activation at slice index {i}"
            )));
        }
    }

    let logits = match head {
        HeadMode::None => None,
        HeadMode::All => {
            let rows: Vec<usize> = (0..n).collect();
            Some(head_logits(state, &x, &rows)?)
        }
        HeadMode::At(rows) => Some(head_logits(state, &x, rows)?),
    };
    Ok((logits, slice_kv))
}

fn qk_norm_rotate(
    head: &mut [f64],
    gain: &[f32],
    eps: f64,
    pos: &Position,
    modality: Modality,
    state: &ModelState,
) {
    let r = rms_scale(head, eps);
    for (v, &g) in head.iter_mut().zip(gain) {
        *v *= r * g as f64;
    }
    rotate_f64(head, pos, state.rope_table(), modality);
}

fn head_logits(state: &ModelState, x: &[Vec<f64>], rows: &[usize]) -> Result<Tensor2D, ModelError> {
    let cfg = &state.config;
    let mut out = Tensor2D::zeros(rows.len(), cfg.visual_vocab);
    for (ri, &i) in rows.iter().enumerate() {
        if i >= x.len() {
            return Err(ModelError::Dimension(format!("head row {i} out of slice")));
        }
        let r = rms_scale(&x[i], cfg.rmsnorm_eps);
        let y: Vec<f64> = x[i]
            .iter()
            .zip(&state.final_norm)
            .map(|(&v, &g)| v * r * g as f64)
            .collect();
        let row = matvec_f32w(&state.head, &y);
        for (o, v) in out.data[ri * cfg.visual_vocab..(ri + 1) * cfg.visual_vocab]
            .iter_mut()
            .zip(row)
        {
            *o = v as f32;
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logits over the visual vocabulary for every input token, no cache.
pub fn forward(
    state: &ModelState,
    tokens: &[u32],
    positions: &[Position],
    modalities: &[Modality],
    mask: &AttentionMask,
) -> Result<Tensor2D, ModelError> {
    run_stack(state, tokens, positions, modalities, mask, None, HeadMode::All)
        .map(|(l, _)| l.expect("requested logits"))
}

/// Logits for selected slice rows only, no cache.
pub fn forward_at(
    state: &ModelState,
    tokens: &[u32],
    positions: &[Position],
    modalities: &[Modality],
    mask: &AttentionMask,
    rows: &[usize],
) -> Result<Tensor2D, ModelError> {
    run_stack(state, tokens, positions, modalities, mask, None, HeadMode::At(rows))
        .map(|(l, _)| l.expect("requested logits"))
}

/// Forward a slice against a read-only cache.
pub fn forward_cached(
    state: &ModelState,
    tokens: &[u32],
    positions: &[Position],
    modalities: &[Modality],
    mask: &AttentionMask,
    cache: &KVCache,
) -> Result<Tensor2D, ModelError> {
    run_stack(state, tokens, positions, modalities, mask, Some(cache), HeadMode::All)
        .map(|(l, _)| l.expect("requested logits"))
}

/// Forward a slice against a read-only cache, logits for selected rows only.
pub fn forward_cached_at(
    state: &ModelState,
    tokens: &[u32],
    positions: &[Position],
    modalities: &[Modality],
    mask: &AttentionMask,
    cache: &KVCache,
    rows: &[usize],
) -> Result<Tensor2D, ModelError> {
    run_stack(state, tokens, positions, modalities, mask, Some(cache), HeadMode::At(rows))
        .map(|(l, _)| l.expect("requested logits"))
}

/// Forward a slice and append its keys/values to the cache.
pub fn forward_extend(
    state: &ModelState,
    tokens: &[u32],
    positions: &[Position],
    modalities: &[Modality],
    mask: &AttentionMask,
    cache: &mut KVCache,
) -> Result<Tensor2D, ModelError> {
    let (logits, kv) =
        run_stack(state, tokens, positions, modalities, mask, Some(cache), HeadMode::All)?;
    cache.append(kv);
    Ok(logits.expect("requested logits"))
}

/// Append a slice's keys/values to the cache without computing logits.
pub fn extend_cache(
    state: &ModelState,
    tokens: &[u32],
    positions: &[Position],
    modalities: &[Modality],
    mask: &AttentionMask,
    cache: &mut KVCache,
) -> Result<(), ModelError> {
    let (_, kv) =
        run_stack(state, tokens, positions, modalities, mask, Some(cache), HeadMode::None)?;
    cache.append(kv);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::build_temporal_causal_mask;
    use crate::model::init_params;
    use crate::numerics::RngState;
    use crate::rope::{assign_modalities, assign_positions};
    use crate::sequence::SequenceLayout;

    fn micro_state(seed: u64) -> ModelState {
        init_params(&crate::model::tests::micro_config(), &mut RngState::new(seed)).unwrap()
    }

    fn random_tokens(layout: &SequenceLayout, state: &ModelState, rng: &mut RngState) -> Vec<u32> {
        let cfg = &state.config;
        let modalities = assign_modalities(layout);
        (0..layout.total_len)
            .map(|i| match modalities[i] {
                Modality::Visual => {
                    cfg.visual_base() + rng.next_below(cfg.visual_vocab as u64) as u32
                }
                Modality::Text => rng.next_below(cfg.text_vocab as u64) as u32,
            })
            .collect()
    }

    #[test]
    fn cache_equivalence_full_vs_frame_by_frame() {
        let mut rng = RngState::new(71);
        for case in 0..5u64 {
            let state = micro_state(100 + case);
            let t = 1 + (case % 3) as usize;
            let layout = SequenceLayout::synthetic(3, t, (2, 2));
            let tokens = random_tokens(&layout, &state, &mut rng);
            let positions = assign_positions(&layout, &state.config.rope);
            let modalities = assign_modalities(&layout);
            let mask = build_temporal_causal_mask(&layout);

            let full = forward(&state, &tokens, &positions, &modalities, &mask).unwrap();

            let mut cache = KVCache::new(&state.config);
            let mut incremental: Vec<f32> = Vec::new();
            let mut cursor = 0usize;
            let mut boundaries = vec![layout.prefix_len];
            boundaries.extend(layout.frames.iter().map(|f| f.end));
            for b in boundaries {
                let logits = forward_extend(
                    &state,
                    &tokens[cursor..b],
                    &positions[cursor..b],
                    &modalities[cursor..b],
                    &mask,
                    &mut cache,
                )
                .unwrap();
                incremental.extend_from_slice(&logits.data);
                cursor = b;
            }
            assert_eq!(cache.len(), layout.total_len);
            assert_eq!(incremental.len(), full.data.len());
            for (a, b) in incremental.iter().zip(&full.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn self_only_mask_isolates_tokens() {
        let state = micro_state(7);
        let layout = SequenceLayout::synthetic(2, 1, (2, 2));
        let mut rng = RngState::new(8);
        let tokens = random_tokens(&layout, &state, &mut rng);
        let positions = assign_positions(&layout, &state.config.rope);
        let modalities = assign_modalities(&layout);
        let mask = crate::masking::AttentionMask::self_only(layout.total_len);
        let base = forward(&state, &tokens, &positions, &modalities, &mask).unwrap();

        // Perturb every token except index 2; its logits must not move.
        let mut other = tokens.clone();
        for (i, t) in other.iter_mut().enumerate() {
            if i != 2 {
                *t = (*t + 1) % state.config.text_vocab as u32;
            }
        }
        let moved = forward(&state, &other, &positions, &modalities, &mask).unwrap();
        for j in 0..state.config.visual_vocab {
            assert!((base.get(2, j) - moved.get(2, j)).abs() < 1e-6);
        }
    }

    #[test]
    fn within_frame_permutation_equivariance() {
        let state = micro_state(21);
        let layout = SequenceLayout::synthetic(2, 2, (2, 2));
        let mut rng = RngState::new(22);
        let tokens = random_tokens(&layout, &state, &mut rng);
        let positions = assign_positions(&layout, &state.config.rope);
        let modalities = assign_modalities(&layout);
        let mask = build_temporal_causal_mask(&layout);
        let base = forward(&state, &tokens, &positions, &modalities, &mask).unwrap();

        // Swap two tokens of frame 0 together with their positions.
        let a = layout.frames[0].content_position(0, 1);
        let b = layout.frames[0].content_position(1, 0);
        let mut tokens2 = tokens.clone();
        tokens2.swap(a, b);
        let mut positions2 = positions.clone();
        positions2.swap(a, b);
        let swapped = forward(&state, &tokens2, &positions2, &modalities, &mask).unwrap();
        for j in 0..state.config.visual_vocab {
            assert!((base.get(a, j) - swapped.get(b, j)).abs() < 1e-9);
            assert!((base.get(b, j) - swapped.get(a, j)).abs() < 1e-9);
        }
        // Tokens of the earlier prefix are untouched.
        for j in 0..state.config.visual_vocab {
            assert!((base.get(0, j) - swapped.get(0, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn causality_probe_exact_zero_influence() {
        let state = micro_state(31);
        let layout = SequenceLayout::synthetic(2, 3, (2, 2));
        let mut rng = RngState::new(32);
        let tokens = random_tokens(&layout, &state, &mut rng);
        let positions = assign_positions(&layout, &state.config.rope);
        let modalities = assign_modalities(&layout);
        let mask = build_temporal_causal_mask(&layout);
        let base = forward(&state, &tokens, &positions, &modalities, &mask).unwrap();

        // Change a token in frame 2; frames 0 and 1 and the prefix must not move.
        let mut tokens2 = tokens.clone();
        let p = layout.frames[2].content_position(1, 1);
        tokens2[p] = state.config.visual_base()
            + (tokens[p] - state.config.visual_base() + 1) % state.config.visual_vocab as u32;
        let moved = forward(&state, &tokens2, &positions, &modalities, &mask).unwrap();
        for i in 0..layout.frames[2].start {
            for j in 0..state.config.visual_vocab {
                assert!(
                    (base.get(i, j) - moved.get(i, j)).abs() < 1e-6,
                    "row {i} changed"
                );
            }
        }
    }

    #[test]
    fn qk_scores_bounded_by_gains() {
        // After QK-Norm, |q . k| <= head_dim * |gain_q|_inf * |gain_k|_inf.
        let state = micro_state(41);
        let cfg = &state.config;
        let mut rng = RngState::new(42);
        let layer = &state.layers[0];
        let dh = cfg.head_dim;
        for _ in 0..20 {
            let raw_q: Vec<f64> = (0..dh).map(|_| rng.next_normal() * 10.0).collect();
            let raw_k: Vec<f64> = (0..dh).map(|_| rng.next_normal() * 10.0).collect();
            let mut q = raw_q.clone();
            let mut k = raw_k.clone();
            qk_norm_rotate(
                &mut q,
                &layer.qk_gain_q,
                cfg.rmsnorm_eps,
                &Position::text(3),
                Modality::Text,
                &state,
            );
            qk_norm_rotate(
                &mut k,
                &layer.qk_gain_k,
                cfg.rmsnorm_eps,
                &Position::text(9),
                Modality::Text,
                &state,
            );
            let gq = layer.qk_gain_q.iter().fold(0.0f64, |m, &g| m.max(g.abs() as f64));
            let gk = layer.qk_gain_k.iter().fold(0.0f64, |m, &g| m.max(g.abs() as f64));
            let bound = dh as f64 * gq * gk;
            assert!(dot(&q, &k).abs() <= bound + 1e-9);
        }
    }

    #[test]
    fn session_errors() {
        let state = micro_state(51);
        let layout = SequenceLayout::synthetic(2, 1, (2, 2));
        let mut rng = RngState::new(52);
        let tokens = random_tokens(&layout, &state, &mut rng);
        let positions = assign_positions(&layout, &state.config.rope);
        let modalities = assign_modalities(&layout);
        // Mask shorter than the session.
        let mask = build_temporal_causal_mask(&SequenceLayout::synthetic(1, 0, (0, 0)));
        assert!(matches!(
            forward(&state, &tokens, &positions, &modalities, &mask),
            Err(ModelError::Session(_))
        ));
        // Token outside the vocabulary.
        let mask = build_temporal_causal_mask(&layout);
        let mut bad = tokens;
        bad[0] = state.config.vocab_total() as u32;
        assert!(matches!(
            forward(&state, &bad, &positions, &modalities, &mask),
            Err(ModelError::Session(_))
        ));
    }
}
