//! Deterministic forward pass with a per-layer choice between full GQA
//! attention and the skipped, rescaled value path.

mod attention;
mod ffn;

pub use attention::{
    gqa_attention, gqa_attention_with, replicate_kv, skipped_attention, AttentionOptions,
    AttentionOutput,
};
pub use ffn::ffn_block;

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{HarpError, Result};
use crate::pruning::{AlphaSchedule, PruneSpec};
use crate::tensor::{matmul_into, rms_norm, Matrix};

/// Attention path of a single layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionPath {
    Full,
    Skipped { alpha: f32 },
}

/// Resolved per-layer attention paths for one forward configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    paths: Vec<AttentionPath>,
    /// Apply the layer's pre-attention RMSNorm before `W_V` on skipped layers.
    pub pruned_prenorm: bool,
}

impl LayerPlan {
    pub fn dense(num_layers: usize) -> Self {
        LayerPlan { paths: vec![AttentionPath::Full; num_layers], pruned_prenorm: true }
    }

    /// `alphas` is top-down: `alphas[i]` applies to the i-th highest pruned layer.
    pub fn new(config: &ModelConfig, spec: &PruneSpec, alphas: &[f32]) -> Result<Self> {
        if alphas.len() != spec.len() {
            return Err(HarpError::contract(format!(
                "{} alphas for {} pruned layers",
                alphas.len(),
                spec.len()
            )));
        }
        let mut plan = Self::dense(config.num_layers);
        for (layer, &alpha) in spec.top_down().into_iter().zip(alphas) {
            if layer >= config.num_layers {
                return Err(HarpError::contract(format!("layer {layer} out of range")));
            }
            if !alpha.is_finite() {
                return Err(HarpError::contract(format!("alpha for layer {layer} is not finite")));
            }
            plan.paths[layer] = AttentionPath::Skipped { alpha };
        }
        Ok(plan)
    }

    pub fn from_schedule(config: &ModelConfig, schedule: &AlphaSchedule) -> Result<Self> {
        let spec = schedule.prune_spec(config.num_layers)?;
        Self::new(config, &spec, &schedule.alphas)
    }

    pub fn with_pruned_prenorm(mut self, on: bool) -> Self {
        self.pruned_prenorm = on;
        self
    }

    pub fn path(&self, layer: usize) -> AttentionPath {
        self.paths[layer]
    }

    pub fn set_path(&mut self, layer: usize, path: AttentionPath) {
        self.paths[layer] = path;
    }

    pub fn num_layers(&self) -> usize {
        self.paths.len()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CaptureFlags {
    pub hidden: bool,
    pub attention: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOutput {
    /// `N × V`.
    pub logits: Matrix,
    /// `L + 1` states: the input of every layer, then the last layer's output.
    pub hidden: Option<Vec<Matrix>>,
    /// Per layer, the state after the attention residual (before the FFN).
    pub after_attention: Option<Vec<Matrix>>,
    /// Per layer, per-head attention matrices; `None` for skipped layers.
    pub attention: Option<Vec<Option<Vec<Matrix>>>>,
}

/// Token embedding lookup with range and capacity checks.
pub fn embed(checkpoint: &Checkpoint, tokens: &[u32]) -> Result<Matrix> {
    let cfg = &checkpoint.config;
    if tokens.is_empty() {
        return Err(HarpError::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(HarpError::Capacity { len: tokens.len(), max: cfg.max_seq_len });
    }
    let mut h = Matrix::zeros(tokens.len(), cfg.hidden_size);
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= cfg.vocab_size {
            return Err(HarpError::Input(format!(
                "token id {t} at position {i} >= vocab_size {}",
                cfg.vocab_size
            )));
        }
        h.row_mut(i).copy_from_slice(checkpoint.embedding.row(t as usize));
    }
    Ok(h)
}

/// Intermediate results of one transformer block.
pub struct BlockOutput {
    pub out: Matrix,
    pub after_attention: Matrix,
    pub attention: Option<Vec<Matrix>>,
}

/// Runs block `layer` (attention sub-block then FFN) on `h`.
pub fn apply_layer(
    checkpoint: &Checkpoint,
    layer: usize,
    h: &Matrix,
    plan: &LayerPlan,
    capture_attention: bool,
) -> Result<BlockOutput> {
    let cfg = &checkpoint.config;
    let w = &checkpoint.layers[layer];
    let (after_attention, attention) = match plan.path(layer) {
        AttentionPath::Full => {
            if w.wq.is_none() {
                return Err(HarpError::contract(format!(
                    "layer {layer} was stripped of Q/K and must be in the prune spec"
                )));
            }
            let x = rms_norm(h, &w.attn_norm)?;
            let opts = AttentionOptions { capture: capture_attention, diagonal_bias: None };
            let att = gqa_attention_with(&x, w, cfg, &opts)?;
            (h.add(&att.out)?, att.probs)
        }
        AttentionPath::Skipped { alpha } => {
            let gain = plan.pruned_prenorm.then_some(w.attn_norm.as_slice());
            (skipped_attention(h, &w.wv, &w.wo, gain, alpha, cfg)?, None)
        }
    };
    let out = ffn_block(&after_attention, w, cfg)?;
    if !out.is_finite() {
        return Err(HarpError::Numeric { layer: Some(layer), what: "non-finite hidden state".into() });
    }
    Ok(BlockOutput { out, after_attention, attention })
}

/// Final RMSNorm and output projection.
pub fn output_logits(checkpoint: &Checkpoint, h: &Matrix) -> Result<Matrix> {
    let x = rms_norm(h, &checkpoint.final_norm)?;
    let out_t = checkpoint.output_matrix().transpose();
    let mut logits = Matrix::zeros(h.rows(), checkpoint.config.vocab_size);
    matmul_into(&x, &out_t, &mut logits);
    if !logits.is_finite() {
        return Err(HarpError::Numeric { layer: None, what: "non-finite logits".into() });
    }
    Ok(logits)
}

pub fn forward(
    checkpoint: &Checkpoint,
    tokens: &[u32],
    plan: &LayerPlan,
    capture: CaptureFlags,
) -> Result<ForwardOutput> {
    let cfg = &checkpoint.config;
    if plan.num_layers() != cfg.num_layers {
        return Err(HarpError::contract("layer plan does not match the checkpoint"));
    }
    let mut h = embed(checkpoint, tokens)?;
    let mut hidden = capture.hidden.then(|| Vec::with_capacity(cfg.num_layers + 1));
    let mut mids = capture.hidden.then(|| Vec::with_capacity(cfg.num_layers));
    let mut attention = capture.attention.then(|| Vec::with_capacity(cfg.num_layers));
    for layer in 0..cfg.num_layers {
        let block = apply_layer(checkpoint, layer, &h, plan, capture.attention)?;
        if let Some(hs) = hidden.as_mut() {
            hs.push(std::mem::take(&mut h));
        }
        if let Some(m) = mids.as_mut() {
            m.push(block.after_attention);
        }
        if let Some(a) = attention.as_mut() {
            a.push(block.attention);
        }
        h = block.out;
    }
    let logits = output_logits(checkpoint, &h)?;
    if let Some(hs) = hidden.as_mut() {
        hs.push(h);
    }
    Ok(ForwardOutput { logits, hidden, after_attention: mids, attention })
}

/// Convenience wrapper: builds the plan from a spec and top-down alphas.
pub fn forward_with_spec(
    checkpoint: &Checkpoint,
    tokens: &[u32],
    spec: &PruneSpec,
    alphas: &[f32],
    capture: CaptureFlags,
) -> Result<ForwardOutput> {
    let plan = LayerPlan::new(&checkpoint.config, spec, alphas)?;
    forward(checkpoint, tokens, &plan, capture)
}
