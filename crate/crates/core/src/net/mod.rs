//! A small decoder-only causal transformer over the unified vocabulary.
//!
//! Pre-norm residual blocks with multi-head causal self-attention and a GELU
//! feed-forward layer, learned positional embeddings, and (by default) an
//! output projection tied to the token embedding. Gradients are computed by
//! hand-written backpropagation through a cached [`ForwardTrace`].
//!
//! All model code is generic over [`Real`]: `f32` for training, `f64` for
//! gradient verification.

mod checkpoint;
mod kernels;
mod model;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, LAYOUT_VERSION};
pub use model::{backward, backward_into, DecodeState, forward, forward_last, ForwardTrace};
pub use params::{
    extend_from_pretrained, init_random, init_random_with_std, init_zeros, pretrained_row_map,
    LayerParams, ModelParams, Tensor, INIT_STD,
};

/// Floating-point element type of model tensors.
pub trait Real:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn lift(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn lift(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn lift(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            vocab_size,
            tie_embeddings: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}
