//! Kernel library for desk-scale autoregressive token-video generation.
//!
//! The crate is organized around two mechanisms: a family of rotary position
//! embeddings for interleaved text/visual token sequences ([`rope`]), and a
//! tube-masked discrete-diffusion training/inference scheme ([`ardf`]) driven
//! by a small Llama-style decoder ([`model`]). Supporting modules provide the
//! sequence grammar ([`sequence`]), mask construction ([`masking`]), synthetic
//! token videos ([`synthdata`]), deterministic numeric kernels ([`numerics`]),
//! and self-check suites ([`verify`]).

pub mod ardf;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod rope;
pub mod sequence;
pub mod synthdata;
pub mod verify;
