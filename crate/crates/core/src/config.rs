use serde::{Deserialize, Serialize};

use crate::error::{HarpError, Result};

/// Architecture hyperparameters of a decoder-only GQA transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f32,
}

impl ModelConfig {
    /// L=4, d=64, 8 query heads over 2 kv heads. Small enough for exhaustive tests.
    pub fn tiny() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_size: 64,
            ffn_size: 256,
            num_query_heads: 8,
            num_kv_heads: 2,
            head_dim: 8,
            vocab_size: 256,
            max_seq_len: 1024,
            rope_base: 10000.0,
        }
    }

    /// L=8, d=256, 8 query heads over 2 kv heads, SwiGLU width 512.
    pub fn desk() -> Self {
        ModelConfig {
            num_layers: 8,
            hidden_size: 256,
            ffn_size: 512,
            num_query_heads: 8,
            num_kv_heads: 2,
            head_dim: 32,
            vocab_size: 256,
            max_seq_len: 4096,
            rope_base: 10000.0,
        }
    }

    /// Layer and head geometry of LLaMA3.1-8B. Only used for shape arithmetic.
    pub fn llama31_8b_shape() -> Self {
        ModelConfig {
            num_layers: 32,
            hidden_size: 4096,
            ffn_size: 14336,
            num_query_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            vocab_size: 128256,
            max_seq_len: 131072,
            rope_base: 500000.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "desk" => Some(Self::desk()),
            "llama31-8b-shape" => Some(Self::llama31_8b_shape()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("num_query_heads", self.num_query_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(HarpError::contract(format!("{name} must be positive")));
            }
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(HarpError::contract("rope_base must be a positive finite number"));
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(HarpError::contract(format!(
                "num_query_heads {} is not a multiple of num_kv_heads {}",
                self.num_query_heads, self.num_kv_heads
            )));
        }
        if self.num_query_heads * self.head_dim != self.hidden_size {
            return Err(HarpError::contract(format!(
                "num_query_heads * head_dim = {} but hidden_size = {}",
                self.num_query_heads * self.head_dim,
                self.hidden_size
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(HarpError::contract("head_dim must be even for rotary embeddings"));
        }
        Ok(())
    }

    /// Query heads per kv head.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.num_query_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    /// W_Q plus W_K parameters of one layer.
    pub fn qk_params_per_layer(&self) -> u64 {
        (self.hidden_size * self.q_dim() + self.hidden_size * self.kv_dim()) as u64
    }

    pub fn params_per_layer(&self) -> u64 {
        let d = self.hidden_size as u64;
        let attn = self.qk_params_per_layer()
            + d * self.kv_dim() as u64
            + self.q_dim() as u64 * d;
        let ffn = 3 * d * self.ffn_size as u64;
        attn + ffn + 2 * d
    }

    /// Total parameter count of a dense checkpoint.
    pub fn param_count(&self, tied_output: bool) -> u64 {
        let d = self.hidden_size as u64;
        let v = self.vocab_size as u64;
        let head = if tied_output { 0 } else { v * d };
        self.num_layers as u64 * self.params_per_layer() + v * d + d + head
    }
}
