//! Toy Llama-style decoder: RMSNorm, SwiGLU, QK-Norm, rotary attention under
//! a block-structured mask, and a KV cache for frame-by-frame decoding.
//!
//! Weights are stored as `f32` tensors (and serialized that way, see
//! [`checkpoint`]); all activations and reductions run in `f64` so cached and
//! uncached forwards agree to machine precision and gradient checks are
//! meaningful.

mod checkpoint;
mod forward;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{extend_cache, forward, forward_at, forward_cached, forward_cached_at, forward_extend, KVCache};
pub use tape::{loss_and_grads, FrameLosses, Grads, LayerGrads, LossSpec};

use thiserror::Error;

use crate::numerics::{RngState, Tensor2D};
use crate::rope::{build_frequency_table, FrequencyTable, RopeConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("session error: {0}")]
    Session(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_multiplier: usize,
    pub text_vocab: usize,
    pub visual_vocab: usize,
    pub rope: RopeConfig,
    pub rmsnorm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_size != self.n_heads * self.head_dim {
            return Err(ModelError::Config(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden_size, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(ModelError::Config("head_dim must be even".into()));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(ModelError::Config(format!(
                "rope head_dim {} != model head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        if self.n_layers == 0 || self.ffn_multiplier == 0 || self.visual_vocab == 0 {
            return Err(ModelError::Config("degenerate model size".into()));
        }
        self.rope.validate().map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_multiplier * self.hidden_size
    }

    pub fn vocab_total(&self) -> usize {
        self.text_vocab + self.visual_vocab
    }

    /// First visual id in this model's vocabulary.
    pub fn visual_base(&self) -> u32 {
        self.text_vocab as u32
    }

    /// Total parameter count, closed form.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_size;
        let f = self.ffn_dim();
        let per_layer = 4 * h * h + 2 * self.head_dim + 2 * h + 3 * f * h;
        self.vocab_total() * h + self.n_layers * per_layer + h + self.visual_vocab * h
    }

    /// Parameter count excluding the embedding table and output head, the
    /// usual budget figure for scaling comparisons.
    pub fn param_count_non_embedding(&self) -> usize {
        self.param_count() - self.vocab_total() * self.hidden_size - self.visual_vocab * self.hidden_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
    pub qk_gain_q: Vec<f32>,
    pub qk_gain_k: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Tensor2D,
    pub w_up: Tensor2D,
    pub w_down: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// One table over text + visual ids, visual rows starting at `text_vocab`.
    pub embedding: Tensor2D,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// Output head over the visual vocabulary only.
    pub head: Tensor2D,
    table: FrequencyTable,
}

impl ModelState {
    pub fn from_parts(
        config: ModelConfig,
        embedding: Tensor2D,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f32>,
        head: Tensor2D,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let table = build_frequency_table(&config.rope)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let s = Self { config, embedding, layers, final_norm, head, table };
        s.check_shapes()?;
        Ok(s)
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let c = &self.config;
        let h = c.hidden_size;
        let f = c.ffn_dim();
        let expect = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(ModelError::Dimension(format!("bad shape for {what}")))
            }
        };
        expect(
            self.embedding.rows == c.vocab_total() && self.embedding.cols == h,
            "embedding",
        )?;
        expect(self.head.rows == c.visual_vocab && self.head.cols == h, "head")?;
        expect(self.final_norm.len() == h, "final_norm")?;
        expect(self.layers.len() == c.n_layers, "layer count")?;
        for l in &self.layers {
            expect(l.attn_norm.len() == h && l.ffn_norm.len() == h, "layer norms")?;
            for w in [&l.wq, &l.wk, &l.wv, &l.wo] {
                expect(w.rows == h && w.cols == h, "attention projection")?;
            }
            expect(
                l.qk_gain_q.len() == c.head_dim && l.qk_gain_k.len() == c.head_dim,
                "qk gains",
            )?;
            expect(l.w_gate.rows == f && l.w_gate.cols == h, "w_gate")?;
            expect(l.w_up.rows == f && l.w_up.cols == h, "w_up")?;
            expect(l.w_down.rows == h && l.w_down.cols == f, "w_down")?;
        }
        Ok(())
    }

    pub fn rope_table(&self) -> &FrequencyTable {
        &self.table
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Tensors in checkpoint declaration order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> =
            vec![("embedding".into(), self.embedding.data.as_slice())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq.data));
            out.push((format!("layers.{i}.wk"), &l.wk.data));
            out.push((format!("layers.{i}.wv"), &l.wv.data));
            out.push((format!("layers.{i}.wo"), &l.wo.data));
            out.push((format!("layers.{i}.qk_gain_q"), &l.qk_gain_q));
            out.push((format!("layers.{i}.qk_gain_k"), &l.qk_gain_k));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate.data));
            out.push((format!("layers.{i}.w_up"), &l.w_up.data));
            out.push((format!("layers.{i}.w_down"), &l.w_down.data));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head.data));
        out
    }

    /// Same order as [`Self::named_tensors`], mutable.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.embedding.data.as_mut_slice()];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.wq.data);
            out.push(&mut l.wk.data);
            out.push(&mut l.wv.data);
            out.push(&mut l.wo.data);
            out.push(&mut l.qk_gain_q);
            out.push(&mut l.qk_gain_k);
            out.push(&mut l.ffn_norm);
            out.push(&mut l.w_gate.data);
            out.push(&mut l.w_up.data);
            out.push(&mut l.w_down.data);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head.data);
        out
    }
}

const INIT_STD: f64 = 0.02;

fn truncated_normal(rng: &mut RngState) -> f32 {
    loop {
        let z = rng.next_normal();
        if z.abs() <= 2.0 {
            return (z * INIT_STD) as f32;
        }
    }
}

fn init_tensor(rows: usize, cols: usize, rng: &mut RngState) -> Tensor2D {
    let data = (0..rows * cols).map(|_| truncated_normal(rng)).collect();
    Tensor2D { rows, cols, data }
}

/// Truncated-normal init (std 0.02, cut at two sigma), norm gains at one,
/// no biases. Deterministic given the seed.
pub fn init_params(config: &ModelConfig, rng: &mut RngState) -> Result<ModelState, ModelError> {
    config.validate()?;
    let h = config.hidden_size;
    let f = config.ffn_dim();
    let embedding = init_tensor(config.vocab_total(), h, rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; h],
            wq: init_tensor(h, h, rng),
            wk: init_tensor(h, h, rng),
            wv: init_tensor(h, h, rng),
            wo: init_tensor(h, h, rng),
            qk_gain_q: vec![1.0; config.head_dim],
            qk_gain_k: vec![1.0; config.head_dim],
            ffn_norm: vec![1.0; h],
            w_gate: init_tensor(f, h, rng),
            w_up: init_tensor(f, h, rng),
            w_down: init_tensor(h, f, rng),
        })
        .collect();
    let final_norm = vec![1.0; h];
    let head = init_tensor(config.visual_vocab, h, rng);
    ModelState::from_parts(config.clone(), embedding, layers, final_norm, head)
}

pub(crate) fn rms_scale(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// `x / sqrt(mean(x^2) + eps) * gain`, computed in f64.
pub fn rmsnorm(x: &[f32], gain: &[f32], eps: f64) -> Result<Vec<f32>, ModelError> {
    if x.len() != gain.len() {
        return Err(ModelError::Dimension(format!(
            "rmsnorm lengths {} vs {}",
            x.len(),
            gain.len()
        )));
    }
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let r = rms_scale(&xf, eps);
    Ok(xf
        .iter()
        .zip(gain)
        .map(|(&v, &g)| (v * r * g as f64) as f32)
        .collect())
}

pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// `W_down (silu(W_gate x) * (W_up x))`, computed in f64.
pub fn swiglu(
    x: &[f32],
    w_gate: &Tensor2D,
    w_up: &Tensor2D,
    w_down: &Tensor2D,
) -> Result<Vec<f32>, ModelError> {
    if w_gate.cols != x.len() || w_up.cols != x.len() {
        return Err(ModelError::Dimension("swiglu input width".into()));
    }
    if w_gate.rows != w_up.rows || w_down.cols != w_gate.rows {
        return Err(ModelError::Dimension("swiglu hidden width".into()));
    }
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let gate = matvec_f32w(w_gate, &xf);
    let up = matvec_f32w(w_up, &xf);
    let act: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    Ok(matvec_f32w(w_down, &act).into_iter().map(|v| v as f32).collect())
}

/// `y = W x` with f32 weights and f64 input/accumulation.
pub(crate) fn matvec_f32w(w: &Tensor2D, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    (0..w.rows)
        .map(|i| {
            w.row(i)
                .iter()
                .zip(x)
                .map(|(&a, &b)| a as f64 * b)
                .sum::<f64>()
        })
        .collect()
}

/// `y = W^T x` with f32 weights and f64 input/accumulation.
pub(crate) fn matvec_t_f32w(w: &Tensor2D, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.rows, x.len());
    let mut out = vec![0.0f64; w.cols];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += wij as f64 * xi;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeVariant;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_size: 32,
            n_heads: 2,
            head_dim: 16,
            ffn_multiplier: 2,
            text_vocab: 24,
            visual_vocab: 13,
            rope: RopeConfig::new(RopeVariant::MmRope, 16),
            rmsnorm_eps: 1e-5,
        }
    }

    #[test]
    fn init_deterministic() {
        let cfg = micro_config();
        let a = init_params(&cfg, &mut RngState::new(5)).unwrap();
        let b = init_params(&cfg, &mut RngState::new(5)).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.layers[1].w_gate, b.layers[1].w_gate);
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn param_count_matches_shape_walk() {
        let cfg = ModelConfig {
            n_layers: 2,
            hidden_size: 64,
            n_heads: 4,
            head_dim: 16,
            ffn_multiplier: 4,
            text_vocab: 100,
            visual_vocab: 50,
            rope: RopeConfig::new(RopeVariant::MRope, 16),
            rmsnorm_eps: 1e-5,
        };
        let state = init_params(&cfg, &mut RngState::new(1)).unwrap();
        let walked: usize = state.named_tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(cfg.param_count(), walked);
        assert_eq!(
            cfg.param_count_non_embedding(),
            walked - (150 * 64) - (50 * 64)
        );
    }

    #[test]
    fn half_billion_config_instantiable() {
        let cfg = ModelConfig {
            n_layers: 16,
            hidden_size: 1024,
            n_heads: 16,
            head_dim: 64,
            ffn_multiplier: 4,
            text_vocab: 65_536,
            visual_vocab: 64_000,
            rope: RopeConfig::new(RopeVariant::MmRope, 64),
            rmsnorm_eps: 1e-5,
        };
        cfg.validate().unwrap();
        let count = cfg.param_count();
        assert!((400_000_000..600_000_000).contains(&count), "{count}");
        // Instantiate and immediately drop; init is the expensive part.
        let state = init_params(&cfg, &mut RngState::new(0)).unwrap();
        assert!(state.embedding.all_finite());
    }

    #[test]
    fn init_values_truncated() {
        let state = init_params(&micro_config(), &mut RngState::new(9)).unwrap();
        for (_, t) in state.named_tensors() {
            for &v in t {
                assert!(v.abs() <= 2.0 * INIT_STD as f32 + f32::EPSILON || v == 1.0);
            }
        }
        assert!(state.layers[0].attn_norm.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn rmsnorm_constant_vector() {
        let out = rmsnorm(&[3.0, 3.0], &[1.0, 1.0], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rmsnorm_zero_vector() {
        let out = rmsnorm(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmsnorm_matches_reference() {
        let mut rng = RngState::new(3);
        for _ in 0..20 {
            let x: Vec<f32> = (0..16).map(|_| rng.next_normal() as f32).collect();
            let g: Vec<f32> = (0..16).map(|_| rng.next_normal() as f32).collect();
            let eps = 1e-5;
            let out = rmsnorm(&x, &g, eps).unwrap();
            let ms: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / 16.0;
            for i in 0..16 {
                let want = x[i] as f64 / (ms + eps).sqrt() * g[i] as f64;
                assert!((out[i] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn swiglu_zero_input() {
        let w = Tensor2D::new(2, 2, vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        let out = swiglu(&[0.0, 0.0], &w, &w, &w).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_identity_scalar() {
        // 1-dim identity weights: swiglu(1) = silu(1) * 1 = 0.731059.
        let id = Tensor2D::new(1, 1, vec![1.0]).unwrap();
        let out = swiglu(&[1.0], &id, &id, &id).unwrap();
        assert!((out[0] - 0.731059).abs() < 1e-5, "{}", out[0]);
    }

    #[test]
    fn swiglu_matches_naive_oracle() {
        let mut rng = RngState::new(4);
        let rand_t = |r: usize, c: usize, rng: &mut RngState| {
            Tensor2D::new(r, c, (0..r * c).map(|_| rng.next_normal() as f32).collect()).unwrap()
        };
        let wg = rand_t(6, 4, &mut rng);
        let wu = rand_t(6, 4, &mut rng);
        let wd = rand_t(4, 6, &mut rng);
        let x: Vec<f32> = (0..4).map(|_| rng.next_normal() as f32).collect();
        let got = swiglu(&x, &wg, &wu, &wd).unwrap();
        // Naive f64 evaluation.
        let mv = |w: &Tensor2D, x: &[f64]| -> Vec<f64> {
            (0..w.rows)
                .map(|i| (0..w.cols).map(|j| w.get(i, j) as f64 * x[j]).sum())
                .collect()
        };
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let g = mv(&wg, &xf);
        let u = mv(&wu, &xf);
        let a: Vec<f64> = g
            .iter()
            .zip(&u)
            .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
            .collect();
        let want = mv(&wd, &a);
        for (gv, wv) in got.iter().zip(&want) {
            assert!((*gv as f64 - wv).abs() < 1e-6);
        }
    }

    #[test]
    fn swiglu_shape_mismatch() {
        let w = Tensor2D::zeros(2, 3);
        assert!(swiglu(&[0.0, 0.0], &w, &w, &w).is_err());
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = micro_config();
        cfg.hidden_size = 33;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.rope.head_dim = 32;
        assert!(cfg.validate().is_err());
    }
}
