//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "ARDF"
//! version          u32      currently 1
//! n_layers         u32
//! hidden_size      u32
//! n_heads          u32
//! head_dim         u32
//! ffn_multiplier   u32
//! text_vocab       u32
//! visual_vocab     u32
//! rmsnorm_eps      f64
//! rope.variant     u8       0=1d 1=scheme1 2=scheme2 3=mrope 4=mmrope
//! rope.base        f64
//! rope.meta_group  u32
//! rope.ratios      3 x u32
//! rope.scales      3 x u32
//! tensors          f32 LE, declaration order: embedding, per layer
//!                  [attn_norm, wq, wk, wv, wo, qk_gain_q, qk_gain_k,
//!                   ffn_norm, w_gate, w_up, w_down], final_norm, head
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::Tensor2D;
use crate::rope::{RopeConfig, RopeVariant};

use super::{LayerWeights, ModelConfig, ModelError, ModelState};

const MAGIC: &[u8; 4] = b"ARDF";
const VERSION: u32 = 1;

fn variant_code(v: RopeVariant) -> u8 {
    match v {
        RopeVariant::Vanilla1D => 0,
        RopeVariant::Scheme1 => 1,
        RopeVariant::Scheme2 => 2,
        RopeVariant::MRope => 3,
        RopeVariant::MmRope => 4,
    }
}

fn variant_from_code(c: u8) -> Result<RopeVariant, ModelError> {
    Ok(match c {
        0 => RopeVariant::Vanilla1D,
        1 => RopeVariant::Scheme1,
        2 => RopeVariant::Scheme2,
        3 => RopeVariant::MRope,
        4 => RopeVariant::MmRope,
        _ => return Err(ModelError::Checkpoint(format!("unknown rope variant code {c}"))),
    })
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<(), ModelError> {
    let file = std::fs::File::create(path)
        .map_err(|e| ModelError::Checkpoint(format!("create {path:?}: {e}")))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let c = &state.config;
    for v in [
        c.n_layers,
        c.hidden_size,
        c.n_heads,
        c.head_dim,
        c.ffn_multiplier,
        c.text_vocab,
        c.visual_vocab,
    ] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
    }
    w.write_all(&c.rmsnorm_eps.to_le_bytes()).map_err(io)?;
    w.write_all(&[variant_code(c.rope.variant)]).map_err(io)?;
    w.write_all(&c.rope.base.to_le_bytes()).map_err(io)?;
    w.write_all(&(c.rope.meta_group_channels as u32).to_le_bytes()).map_err(io)?;
    for v in [c.rope.ratios.0, c.rope.ratios.1, c.rope.ratios.2] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
    }
    for v in [c.rope.scales.0, c.rope.scales.1, c.rope.scales.2] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for (_, tensor) in state.named_tensors() {
        for &x in tensor {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    let file = std::fs::File::open(path)
        .map_err(|e| ModelError::Checkpoint(format!("open {path:?}: {e}")))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| ModelError::Checkpoint(e.to_string());

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<u32, ModelError> {
        r.read_exact(&mut u32buf).map_err(io)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let n_layers = read_u32(&mut r)? as usize;
    let hidden_size = read_u32(&mut r)? as usize;
    let n_heads = read_u32(&mut r)? as usize;
    let head_dim = read_u32(&mut r)? as usize;
    let ffn_multiplier = read_u32(&mut r)? as usize;
    let text_vocab = read_u32(&mut r)? as usize;
    let visual_vocab = read_u32(&mut r)? as usize;
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut f64buf).map_err(io)?;
    let rmsnorm_eps = f64::from_le_bytes(f64buf);
    let mut code = [0u8; 1];
    r.read_exact(&mut code).map_err(io)?;
    let variant = variant_from_code(code[0])?;
    r.read_exact(&mut f64buf).map_err(io)?;
    let base = f64::from_le_bytes(f64buf);
    let meta_group_channels = read_u32(&mut r)? as usize;
    let ratios = (
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    );
    let scales = (read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);

    let config = ModelConfig {
        n_layers,
        hidden_size,
        n_heads,
        head_dim,
        ffn_multiplier,
        text_vocab,
        visual_vocab,
        rope: RopeConfig { variant, head_dim, base, meta_group_channels, ratios, scales },
        rmsnorm_eps,
    };
    config.validate()?;

    let mut read_vec = |len: usize| -> Result<Vec<f32>, ModelError> {
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let h = hidden_size;
    let f = config.ffn_dim();
    let embedding = Tensor2D::new(config.vocab_total(), h, read_vec(config.vocab_total() * h)?)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(LayerWeights {
            attn_norm: read_vec(h)?,
            wq: Tensor2D { rows: h, cols: h, data: read_vec(h * h)? },
            wk: Tensor2D { rows: h, cols: h, data: read_vec(h * h)? },
            wv: Tensor2D { rows: h, cols: h, data: read_vec(h * h)? },
            wo: Tensor2D { rows: h, cols: h, data: read_vec(h * h)? },
            qk_gain_q: read_vec(head_dim)?,
            qk_gain_k: read_vec(head_dim)?,
            ffn_norm: read_vec(h)?,
            w_gate: Tensor2D { rows: f, cols: h, data: read_vec(f * h)? },
            w_up: Tensor2D { rows: f, cols: h, data: read_vec(f * h)? },
            w_down: Tensor2D { rows: h, cols: f, data: read_vec(h * f)? },
        });
    }
    let final_norm = read_vec(h)?;
    let head = Tensor2D {
        rows: visual_vocab,
        cols: h,
        data: read_vec(visual_vocab * h)?,
    };
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing).map_err(io)?;
    if !trailing.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after tensors",
            trailing.len()
        )));
    }
    ModelState::from_parts(config, embedding, layers, final_norm, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::RngState;

    #[test]
    fn round_trip_bit_exact() {
        let cfg = crate::model::tests::micro_config();
        let state = init_params(&cfg, &mut RngState::new(77)).unwrap();
        let dir = std::env::temp_dir().join("ardf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ardf");
        save_checkpoint(&path, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, state.config);
        assert_eq!(loaded.embedding, state.embedding);
        assert_eq!(loaded.layers[1].w_down, state.layers[1].w_down);
        assert_eq!(loaded.head, state.head);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("ardf_ckpt_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ardf");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
