//! Training-path forward with recorded activations and the matching
//! backward pass. The head and cross-entropy run position-chunked so peak
//! memory stays bounded by `chunk_size` logit rows; accumulation order is
//! positional, so the loss is bit-identical for every chunk size.

use std::collections::HashMap;

use crate::masking::AttentionMask;
use crate::rope::{rotate_f64, rotate_inverse_f64, Modality, Position};

use super::{matvec_f32w, matvec_t_f32w, rms_scale, silu, ModelError, ModelState};

#[derive(Debug, Clone)]
pub struct LossSpec<'a> {
    /// Clean target ids for the full slice.
    pub targets: &'a [u32],
    /// Positions contributing to the loss (masked visual positions).
    pub loss_mask: &'a [bool],
    /// Frame index per position, for the per-frame breakdown.
    pub frame_of: &'a [Option<usize>],
    pub n_frames: usize,
    pub chunk_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLosses {
    pub mean: f64,
    /// Mean loss per frame index; frames without loss positions hold NaN.
    pub per_frame: Vec<f64>,
    pub per_frame_count: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub attn_norm: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub qk_gain_q: Vec<f64>,
    pub qk_gain_k: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub w_gate: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub embedding_rows: HashMap<u32, Vec<f64>>,
    pub layers: Vec<LayerGrads>,
    pub final_norm: Vec<f64>,
    pub head: Vec<f64>,
}

impl Grads {
    pub fn zeros(config: &super::ModelConfig) -> Self {
        let h = config.hidden_size;
        let f = config.ffn_dim();
        Self {
            embedding_rows: HashMap::new(),
            layers: (0..config.n_layers)
                .map(|_| LayerGrads {
                    attn_norm: vec![0.0; h],
                    wq: vec![0.0; h * h],
                    wk: vec![0.0; h * h],
                    wv: vec![0.0; h * h],
                    wo: vec![0.0; h * h],
                    qk_gain_q: vec![0.0; config.head_dim],
                    qk_gain_k: vec![0.0; config.head_dim],
                    ffn_norm: vec![0.0; h],
                    w_gate: vec![0.0; f * h],
                    w_up: vec![0.0; f * h],
                    w_down: vec![0.0; h * f],
                })
                .collect(),
            final_norm: vec![0.0; h],
            head: vec![0.0; config.visual_vocab * h],
        }
    }

    /// `self += other * scale`, used for batch averaging.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
            for (d, &x) in dst.iter_mut().zip(src) {
                *d += x * s;
            }
        }
        for (id, row) in &other.embedding_rows {
            let dst = self
                .embedding_rows
                .entry(*id)
                .or_insert_with(|| vec![0.0; row.len()]);
            axpy(dst, row, scale);
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(&mut a.attn_norm, &b.attn_norm, scale);
            axpy(&mut a.wq, &b.wq, scale);
            axpy(&mut a.wk, &b.wk, scale);
            axpy(&mut a.wv, &b.wv, scale);
            axpy(&mut a.wo, &b.wo, scale);
            axpy(&mut a.qk_gain_q, &b.qk_gain_q, scale);
            axpy(&mut a.qk_gain_k, &b.qk_gain_k, scale);
            axpy(&mut a.ffn_norm, &b.ffn_norm, scale);
            axpy(&mut a.w_gate, &b.w_gate, scale);
            axpy(&mut a.w_up, &b.w_up, scale);
            axpy(&mut a.w_down, &b.w_down, scale);
        }
        axpy(&mut self.final_norm, &other.final_norm, scale);
        axpy(&mut self.head, &other.head, scale);
    }
}

struct LayerTape {
    r_attn: Vec<f64>,
    normed_attn: Vec<f64>,
    q_raw: Vec<f64>,
    k_raw: Vec<f64>,
    r_q: Vec<f64>,
    r_k: Vec<f64>,
    q_rot: Vec<f64>,
    k_rot: Vec<f64>,
    v: Vec<f64>,
    /// heads x L x L softmax probabilities (zero where masked).
    probs: Vec<f64>,
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    r_ffn: Vec<f64>,
    normed_ffn: Vec<f64>,
    gate_raw: Vec<f64>,
    up_raw: Vec<f64>,
}

fn rmsnorm_backward(x: &[f64], r: f64, dnormed: &[f64], dx: &mut [f64]) {
    let h = x.len() as f64;
    let s: f64 = dnormed.iter().zip(x).map(|(d, v)| d * v).sum();
    let c = r * r * r * s / h;
    for ((dxk, &dk), &xk) in dx.iter_mut().zip(dnormed).zip(x) {
        *dxk += r * dk - c * xk;
    }
}

fn outer_acc(dw: &mut [f64], dout: &[f64], inp: &[f64]) {
    let cols = inp.len();
    for (i, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut dw[i * cols..(i + 1) * cols];
        for (w, &x) in row.iter_mut().zip(inp) {
            *w += d * x;
        }
    }
}

/// Forward the full slice (no cache), compute the masked cross-entropy in
/// chunks, and return analytic gradients for every parameter.
pub fn loss_and_grads(
    state: &ModelState,
    tokens: &[u32],
    positions: &[Position],
    modalities: &[Modality],
    mask: &AttentionMask,
    spec: &LossSpec,
) -> Result<(FrameLosses, Grads), ModelError> {
    let cfg = &state.config;
    let n = tokens.len();
    let h = cfg.hidden_size;
    let dh = cfg.head_dim;
    let heads = cfg.n_heads;
    let f = cfg.ffn_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    if positions.len() != n || modalities.len() != n || spec.targets.len() != n
        || spec.loss_mask.len() != n || spec.frame_of.len() != n
    {
        return Err(ModelError::Dimension("loss inputs misaligned with slice".into()));
    }
    if mask.len() < n {
        return Err(ModelError::Session("mask shorter than slice".into()));
    }
    if spec.chunk_size == 0 {
        return Err(ModelError::Dimension("chunk_size must be >= 1".into()));
    }
    let loss_positions: Vec<usize> = (0..n).filter(|&i| spec.loss_mask[i]).collect();
    if loss_positions.is_empty() {
        return Err(ModelError::Numeric("no loss positions".into()));
    }

    // ---- forward with tape ----
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_layers + 1);
    let mut x = vec![0.0f64; n * h];
    for (i, &id) in tokens.iter().enumerate() {
        if id as usize >= cfg.vocab_total() {
            return Err(ModelError::Session(format!("token id {id} out of vocabulary")));
        }
        for (d, &e) in x[i * h..(i + 1) * h].iter_mut().zip(state.embedding.row(id as usize)) {
            *d = e as f64;
        }
    }

    let mut tapes: Vec<LayerTape> = Vec::with_capacity(cfg.n_layers);
    for layer in &state.layers {
        xs.push(x.clone());
        let x_in = xs.last().unwrap();
        let mut tape = LayerTape {
            r_attn: vec![0.0; n],
            normed_attn: vec![0.0; n * h],
            q_raw: vec![0.0; n * h],
            k_raw: vec![0.0; n * h],
            r_q: vec![0.0; n * heads],
            r_k: vec![0.0; n * heads],
            q_rot: vec![0.0; n * h],
            k_rot: vec![0.0; n * h],
            v: vec![0.0; n * h],
            probs: vec![0.0; heads * n * n],
            ctx: vec![0.0; n * h],
            x_mid: vec![0.0; n * h],
            r_ffn: vec![0.0; n],
            normed_ffn: vec![0.0; n * h],
            gate_raw: vec![0.0; n * f],
            up_raw: vec![0.0; n * f],
        };

        for i in 0..n {
            let xi = &x_in[i * h..(i + 1) * h];
            let r = rms_scale(xi, cfg.rmsnorm_eps);
            tape.r_attn[i] = r;
            let normed = &mut tape.normed_attn[i * h..(i + 1) * h];
            for (nk, &xk) in normed.iter_mut().zip(xi) {
                *nk = xk * r;
            }
            let gained: Vec<f64> = normed
                .iter()
                .zip(&layer.attn_norm)
                .map(|(&v, &g)| v * g as f64)
                .collect();
            let q = matvec_f32w(&layer.wq, &gained);
            let k = matvec_f32w(&layer.wk, &gained);
            let v = matvec_f32w(&layer.wv, &gained);
            tape.q_raw[i * h..(i + 1) * h].copy_from_slice(&q);
            tape.k_raw[i * h..(i + 1) * h].copy_from_slice(&k);
            tape.v[i * h..(i + 1) * h].copy_from_slice(&v);
            let (q_rot, k_rot) = (
                &mut tape.q_rot[i * h..(i + 1) * h],
                &mut tape.k_rot[i * h..(i + 1) * h],
            );
            q_rot.copy_from_slice(&q);
            k_rot.copy_from_slice(&k);
            for head in 0..heads {
                let s = head * dh;
                let rq = rms_scale(&q_rot[s..s + dh], cfg.rmsnorm_eps);
                tape.r_q[i * heads + head] = rq;
                for (v, &g) in q_rot[s..s + dh].iter_mut().zip(&layer.qk_gain_q) {
                    *v *= rq * g as f64;
                }
                rotate_f64(&mut q_rot[s..s + dh], &positions[i], state.rope_table(), modalities[i]);
                let rk = rms_scale(&k_rot[s..s + dh], cfg.rmsnorm_eps);
                tape.r_k[i * heads + head] = rk;
                for (v, &g) in k_rot[s..s + dh].iter_mut().zip(&layer.qk_gain_k) {
                    *v *= rk * g as f64;
                }
                rotate_f64(&mut k_rot[s..s + dh], &positions[i], state.rope_table(), modalities[i]);
            }
        }

        // Attention.
        for head in 0..heads {
            let hs = head * dh;
            for i in 0..n {
                let q_head = &tape.q_rot[i * h + hs..i * h + hs + dh];
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                let row = &mut tape.probs[(head * n + i) * n..(head * n + i + 1) * n];
                for j in 0..n {
                    if !mask.attendable(i, j) {
                        row[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    any = true;
                    let k_head = &tape.k_rot[j * h + hs..j * h + hs + dh];
                    let s: f64 =
                        q_head.iter().zip(k_head).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                if !any {
                    return Err(ModelError::Session(format!("query {i} attends no keys")));
                }
                let mut denom = 0.0;
                for s in row.iter_mut() {
                    if *s == f64::NEG_INFINITY {
                        *s = 0.0;
                    } else {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                }
                for s in row.iter_mut() {
                    *s /= denom;
                }
                let ctx = &mut tape.ctx[i * h + hs..i * h + hs + dh];
                for (j, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let v_head = &tape.v[j * h + hs..j * h + hs + dh];
                    for (c, &v) in ctx.iter_mut().zip(v_head) {
                        *c += p * v;
                    }
                }
            }
        }

        for i in 0..n {
            let attn_out = matvec_f32w(&layer.wo, &tape.ctx[i * h..(i + 1) * h]);
            let x_mid = &mut tape.x_mid[i * h..(i + 1) * h];
            for ((m, &xi), &a) in x_mid.iter_mut().zip(&x_in[i * h..(i + 1) * h]).zip(&attn_out) {
                *m = xi + a;
            }
            let r = rms_scale(x_mid, cfg.rmsnorm_eps);
            tape.r_ffn[i] = r;
            let normed = &mut tape.normed_ffn[i * h..(i + 1) * h];
            for (nk, &mk) in normed.iter_mut().zip(x_mid.iter()) {
                *nk = mk * r;
            }
            let gained: Vec<f64> = normed
                .iter()
                .zip(&layer.ffn_norm)
                .map(|(&v, &g)| v * g as f64)
                .collect();
            let gate = matvec_f32w(&layer.w_gate, &gained);
            let up = matvec_f32w(&layer.w_up, &gained);
            tape.gate_raw[i * f..(i + 1) * f].copy_from_slice(&gate);
            tape.up_raw[i * f..(i + 1) * f].copy_from_slice(&up);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let down = matvec_f32w(&layer.w_down, &act);
            let x_next = &mut x[i * h..(i + 1) * h];
            for ((o, &m), &d) in x_next.iter_mut().zip(tape.x_mid[i * h..(i + 1) * h].iter()).zip(&down) {
                *o = m + d;
            }
        }
        tapes.push(tape);
    }
    xs.push(x.clone());
    let x_final = xs.last().unwrap();
    if x_final.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numeric("non-finite activation in training forward".into()));
    }

    // ---- head + chunked cross-entropy ----
    let mut r_final = vec![0.0f64; n];
    let mut normed_final = vec![0.0f64; n * h];
    for i in 0..n {
        let xi = &x_final[i * h..(i + 1) * h];
        let r = rms_scale(xi, cfg.rmsnorm_eps);
        r_final[i] = r;
        for (nk, &xk) in normed_final[i * h..(i + 1) * h].iter_mut().zip(xi) {
            *nk = xk * r;
        }
    }

    let mut grads = Grads::zeros(cfg);
    let inv_count = 1.0 / loss_positions.len() as f64;
    let mut total = 0.0f64;
    let mut per_frame = vec![0.0f64; spec.n_frames];
    let mut per_frame_count = vec![0usize; spec.n_frames];
    let mut dy = vec![0.0f64; n * h];
    let vb = cfg.visual_base();

    let mut logits = vec![0.0f64; cfg.visual_vocab];
    for chunk in loss_positions.chunks(spec.chunk_size) {
        for &i in chunk {
            let y: Vec<f64> = normed_final[i * h..(i + 1) * h]
                .iter()
                .zip(&state.final_norm)
                .map(|(&v, &g)| v * g as f64)
                .collect();
            for (l, hr) in logits.iter_mut().zip(0..cfg.visual_vocab) {
                *l = state
                    .head
                    .row(hr)
                    .iter()
                    .zip(&y)
                    .map(|(&w, &x)| w as f64 * x)
                    .sum();
            }
            let target = spec.targets[i];
            if target < vb || (target - vb) as usize >= cfg.visual_vocab {
                return Err(ModelError::Session(format!(
                    "loss target {target} at {i} outside the visual vocabulary"
                )));
            }
            let tcol = (target - vb) as usize;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sumexp: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
            let lse = max + sumexp.ln();
            let loss = lse - logits[tcol];
            total += loss;
            if let Some(fi) = spec.frame_of[i] {
                per_frame[fi] += loss;
                per_frame_count[fi] += 1;
            }
            // dlogits = softmax - onehot, scaled by 1/count.
            let dyi = &mut dy[i * h..(i + 1) * h];
            for (v, &l) in logits.iter().enumerate() {
                let mut dl = (l - lse).exp();
                if v == tcol {
                    dl -= 1.0;
                }
                dl *= inv_count;
                if dl == 0.0 {
                    continue;
                }
                let head_row = state.head.row(v);
                for (d, &w) in dyi.iter_mut().zip(head_row) {
                    *d += dl * w as f64;
                }
                let ghead = &mut grads.head[v * h..(v + 1) * h];
                for (g, &yk) in ghead.iter_mut().zip(&y) {
                    *g += dl * yk;
                }
            }
        }
    }

    // ---- backward through the stack ----
    let mut dx = vec![0.0f64; n * h];
    for i in 0..n {
        let dyi = &dy[i * h..(i + 1) * h];
        if dyi.iter().all(|&v| v == 0.0) {
            continue;
        }
        let normed = &normed_final[i * h..(i + 1) * h];
        let mut dnormed = vec![0.0f64; h];
        for k in 0..h {
            grads.final_norm[k] += dyi[k] * normed[k];
            dnormed[k] = dyi[k] * state.final_norm[k] as f64;
        }
        rmsnorm_backward(
            &x_final[i * h..(i + 1) * h],
            r_final[i],
            &dnormed,
            &mut dx[i * h..(i + 1) * h],
        );
    }

    for li in (0..cfg.n_layers).rev() {
        let layer = &state.layers[li];
        let tape = &tapes[li];
        let g = &mut grads.layers[li];
        let x_in = &xs[li];
        let mut dx_mid = vec![0.0f64; n * h];

        // FFN backward.
        for i in 0..n {
            let ddown = &dx[i * h..(i + 1) * h];
            let gate = &tape.gate_raw[i * f..(i + 1) * f];
            let up = &tape.up_raw[i * f..(i + 1) * f];
            let act: Vec<f64> = gate.iter().zip(up).map(|(&g, &u)| silu(g) * u).collect();
            outer_acc(&mut g.w_down, ddown, &act);
            let dact = matvec_t_f32w(&layer.w_down, ddown);
            let mut dgate = vec![0.0f64; f];
            let mut dup = vec![0.0f64; f];
            for k in 0..f {
                let sig = 1.0 / (1.0 + (-gate[k]).exp());
                let silu_g = gate[k] * sig;
                dgate[k] = dact[k] * up[k] * sig * (1.0 + gate[k] * (1.0 - sig));
                dup[k] = dact[k] * silu_g;
            }
            let normed = &tape.normed_ffn[i * h..(i + 1) * h];
            let gained: Vec<f64> = normed
                .iter()
                .zip(&layer.ffn_norm)
                .map(|(&v, &gn)| v * gn as f64)
                .collect();
            outer_acc(&mut g.w_gate, &dgate, &gained);
            outer_acc(&mut g.w_up, &dup, &gained);
            let mut dgained = matvec_t_f32w(&layer.w_gate, &dgate);
            for (d, u) in dgained.iter_mut().zip(matvec_t_f32w(&layer.w_up, &dup)) {
                *d += u;
            }
            let mut dnormed = vec![0.0f64; h];
            for k in 0..h {
                g.ffn_norm[k] += dgained[k] * normed[k];
                dnormed[k] = dgained[k] * layer.ffn_norm[k] as f64;
            }
            let dmid = &mut dx_mid[i * h..(i + 1) * h];
            dmid.copy_from_slice(ddown); // residual path
            rmsnorm_backward(&tape.x_mid[i * h..(i + 1) * h], tape.r_ffn[i], &dnormed, dmid);
        }

        // Attention backward.
        let mut dctx = vec![0.0f64; n * h];
        for i in 0..n {
            let dattn = &dx_mid[i * h..(i + 1) * h];
            outer_acc(&mut g.wo, dattn, &tape.ctx[i * h..(i + 1) * h]);
            let d = matvec_t_f32w(&layer.wo, dattn);
            dctx[i * h..(i + 1) * h].copy_from_slice(&d);
        }

        let mut dq_rot = vec![0.0f64; n * h];
        let mut dk_rot = vec![0.0f64; n * h];
        let mut dv = vec![0.0f64; n * h];
        for head in 0..heads {
            let hs = head * dh;
            for i in 0..n {
                let dctx_head = &dctx[i * h + hs..i * h + hs + dh];
                if dctx_head.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let prow = &tape.probs[(head * n + i) * n..(head * n + i + 1) * n];
                // dp and the softmax Jacobian.
                let mut dp = vec![0.0f64; n];
                let mut srow = 0.0f64;
                for j in 0..n {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let v_head = &tape.v[j * h + hs..j * h + hs + dh];
                    dp[j] = dctx_head.iter().zip(v_head).map(|(a, b)| a * b).sum();
                    srow += prow[j] * dp[j];
                }
                let q_head = &tape.q_rot[i * h + hs..i * h + hs + dh];
                for j in 0..n {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - srow);
                    // dv from the context combination.
                    let dv_head = &mut dv[j * h + hs..j * h + hs + dh];
                    for (d, &c) in dv_head.iter_mut().zip(dctx_head) {
                        *d += prow[j] * c;
                    }
                    if ds == 0.0 {
                        continue;
                    }
                    let k_head = &tape.k_rot[j * h + hs..j * h + hs + dh];
                    let dq_head = &mut dq_rot[i * h + hs..i * h + hs + dh];
                    for (d, &kv) in dq_head.iter_mut().zip(k_head) {
                        *d += ds * kv * scale;
                    }
                    let dk_head = &mut dk_rot[j * h + hs..j * h + hs + dh];
                    for (d, &qv) in dk_head.iter_mut().zip(q_head) {
                        *d += ds * qv * scale;
                    }
                }
            }
        }

        // Through rope, QK-Norm and the projections.
        let mut dgained_sum = vec![0.0f64; n * h];
        for i in 0..n {
            let mut dq_raw = vec![0.0f64; h];
            let mut dk_raw = vec![0.0f64; h];
            for head in 0..heads {
                let s = head * dh;
                let mut dqt = dq_rot[i * h + s..i * h + s + dh].to_vec();
                rotate_inverse_f64(&mut dqt, &positions[i], state.rope_table(), modalities[i]);
                let q_raw = &tape.q_raw[i * h + s..i * h + s + dh];
                let rq = tape.r_q[i * heads + head];
                let mut dnormed = vec![0.0f64; dh];
                for k in 0..dh {
                    let normed_k = q_raw[k] * rq;
                    g.qk_gain_q[k] += dqt[k] * normed_k;
                    dnormed[k] = dqt[k] * layer.qk_gain_q[k] as f64;
                }
                rmsnorm_backward(q_raw, rq, &dnormed, &mut dq_raw[s..s + dh]);

                let mut dkt = dk_rot[i * h + s..i * h + s + dh].to_vec();
                rotate_inverse_f64(&mut dkt, &positions[i], state.rope_table(), modalities[i]);
                let k_raw = &tape.k_raw[i * h + s..i * h + s + dh];
                let rk = tape.r_k[i * heads + head];
                let mut dnormed = vec![0.0f64; dh];
                for k in 0..dh {
                    let normed_k = k_raw[k] * rk;
                    g.qk_gain_k[k] += dkt[k] * normed_k;
                    dnormed[k] = dkt[k] * layer.qk_gain_k[k] as f64;
                }
                rmsnorm_backward(k_raw, rk, &dnormed, &mut dk_raw[s..s + dh]);
            }
            let dv_i = &dv[i * h..(i + 1) * h];
            let normed = &tape.normed_attn[i * h..(i + 1) * h];
            let gained: Vec<f64> = normed
                .iter()
                .zip(&layer.attn_norm)
                .map(|(&v, &gn)| v * gn as f64)
                .collect();
            outer_acc(&mut g.wq, &dq_raw, &gained);
            outer_acc(&mut g.wk, &dk_raw, &gained);
            outer_acc(&mut g.wv, dv_i, &gained);
            let mut dgained = matvec_t_f32w(&layer.wq, &dq_raw);
            for (d, v) in dgained.iter_mut().zip(matvec_t_f32w(&layer.wk, &dk_raw)) {
                *d += v;
            }
            for (d, v) in dgained.iter_mut().zip(matvec_t_f32w(&layer.wv, dv_i)) {
                *d += v;
            }
            dgained_sum[i * h..(i + 1) * h].copy_from_slice(&dgained);
        }

        for i in 0..n {
            let dgained = &dgained_sum[i * h..(i + 1) * h];
            let normed = &tape.normed_attn[i * h..(i + 1) * h];
            let mut dnormed = vec![0.0f64; h];
            for k in 0..h {
                g.attn_norm[k] += dgained[k] * normed[k];
                dnormed[k] = dgained[k] * layer.attn_norm[k] as f64;
            }
            // dx = residual (dx_mid) + norm path.
            let dxi = &mut dx[i * h..(i + 1) * h];
            dxi.copy_from_slice(&dx_mid[i * h..(i + 1) * h]);
            rmsnorm_backward(&x_in[i * h..(i + 1) * h], tape.r_attn[i], &dnormed, dxi);
        }
    }

    // Embedding rows.
    for (i, &id) in tokens.iter().enumerate() {
        let dxi = &dx[i * h..(i + 1) * h];
        if dxi.iter().all(|&v| v == 0.0) {
            continue;
        }
        let row = grads
            .embedding_rows
            .entry(id)
            .or_insert_with(|| vec![0.0; h]);
        for (r, &v) in row.iter_mut().zip(dxi) {
            *r += v;
        }
    }

    let count = loss_positions.len();
    let losses = FrameLosses {
        mean: total / count as f64,
        per_frame: per_frame
            .iter()
            .zip(&per_frame_count)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        per_frame_count,
        count,
    };
    Ok((losses, grads))
}
