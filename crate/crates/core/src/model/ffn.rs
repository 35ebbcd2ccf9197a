use crate::checkpoint::LayerWeights;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::tensor::{rms_norm, silu, Matrix};

/// SwiGLU feed-forward sub-block with its residual:
/// `H + down(silu(norm(H)·W_gate) ⊙ norm(H)·W_up)`.
pub fn ffn_block(h: &Matrix, weights: &LayerWeights, config: &ModelConfig) -> Result<Matrix> {
    h.expect_shape((h.rows(), config.hidden_size), "ffn input")?;
    let x = rms_norm(h, &weights.ffn_norm)?;
    let mut gate = x.matmul(&weights.w_gate)?;
    let up = x.matmul(&weights.w_up)?;
    for (g, &u) in gate.as_mut_slice().iter_mut().zip(up.as_slice()) {
        *g = silu(*g) * u;
    }
    let down = gate.matmul(&weights.w_down)?;
    h.add(&down)
}
