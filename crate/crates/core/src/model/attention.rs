//! Full causal GQA attention and the skipped (value/output only) path.

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::checkpoint::LayerWeights;
use crate::error::{HarpError, Result};
use crate::tensor::{apply_rope, dot, matmul_into, rms_norm, softmax_in_place, Matrix};

#[derive(Clone, Debug, Default)]
pub struct AttentionOptions {
    /// Keep the per-head `N × N` probability matrices.
    pub capture: bool,
    /// Added to every diagonal score before the softmax. A large value
    /// forces one-hot (identity) attention.
    pub diagonal_bias: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `N × d` attention output, before the residual add.
    pub out: Matrix,
    /// One row-stochastic causal matrix per query head, when captured.
    pub probs: Option<Vec<Matrix>>,
}

/// Causal GQA attention over already-normalized input `x`. Query head `h`
/// reads kv head `h / g`. Always captures attention probabilities.
pub fn gqa_attention(x: &Matrix, weights: &LayerWeights, config: &ModelConfig) -> Result<(Matrix, Vec<Matrix>)> {
    let opts = AttentionOptions { capture: true, diagonal_bias: None };
    let AttentionOutput { out, probs } = gqa_attention_with(x, weights, config, &opts)?;
    Ok((out, probs.unwrap_or_default()))
}

pub fn gqa_attention_with(
    x: &Matrix,
    weights: &LayerWeights,
    config: &ModelConfig,
    opts: &AttentionOptions,
) -> Result<AttentionOutput> {
    let n = x.rows();
    if n == 0 {
        return Err(HarpError::contract("attention over an empty sequence"));
    }
    x.expect_shape((n, config.hidden_size), "attention input")?;
    let (wq, wk) = match (&weights.wq, &weights.wk) {
        (Some(q), Some(k)) => (q, k),
        _ => return Err(HarpError::contract("layer has no Q/K weights; its attention must be skipped")),
    };
    let hd = config.head_dim;
    let group = config.group_size();

    let mut q = x.matmul(wq)?;
    let mut k = x.matmul(wk)?;
    let v = x.matmul(&weights.wv)?;
    apply_rope(&mut q, config.num_query_heads, hd, config.rope_base);
    apply_rope(&mut k, config.num_kv_heads, hd, config.rope_base);
    let scale = 1.0 / (hd as f32).sqrt();

    let heads: Vec<(Vec<f32>, Option<Matrix>)> = (0..config.num_query_heads)
        .into_par_iter()
        .map(|h| {
            let kv = h / group;
            let mut head_out = vec![0.0f32; n * hd];
            let mut probs = opts.capture.then(|| Matrix::zeros(n, n));
            let mut scores = vec![0.0f32; n];
            for i in 0..n {
                let qi = &q.row(i)[h * hd..(h + 1) * hd];
                let row = &mut scores[..=i];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[kv * hd..(kv + 1) * hd]) * scale;
                }
                if let Some(bias) = opts.diagonal_bias {
                    row[i] += bias;
                }
                softmax_in_place(row);
                let acc = &mut head_out[i * hd..(i + 1) * hd];
                for (j, &a) in row.iter().enumerate() {
                    let vj = &v.row(j)[kv * hd..(kv + 1) * hd];
                    for (o, &x) in acc.iter_mut().zip(vj) {
                        *o += a * x;
                    }
                }
                if let Some(p) = probs.as_mut() {
                    p.row_mut(i)[..=i].copy_from_slice(row);
                }
            }
            (head_out, probs)
        })
        .collect();

    let mut concat = Matrix::zeros(n, config.q_dim());
    let mut captured = opts.capture.then(|| Vec::with_capacity(heads.len()));
    for (h, (head_out, probs)) in heads.into_iter().enumerate() {
        for i in 0..n {
            concat.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(&head_out[i * hd..(i + 1) * hd]);
        }
        if let (Some(c), Some(p)) = (captured.as_mut(), probs) {
            c.push(p);
        }
    }
    let out = concat.matmul(&weights.wo)?;
    Ok(AttentionOutput { out, probs: captured })
}

/// Expands `N × n_kv·hd` values to `N × n_q·hd`: kv head `k` fills query-head
/// slots `k·g .. k·g+g`.
pub fn replicate_kv(v: &Matrix, config: &ModelConfig) -> Result<Matrix> {
    v.expect_shape((v.rows(), config.kv_dim()), "values")?;
    let (hd, g) = (config.head_dim, config.group_size());
    let mut out = Matrix::zeros(v.rows(), config.q_dim());
    for i in 0..v.rows() {
        let src = v.row(i);
        let dst = out.row_mut(i);
        for kv in 0..config.num_kv_heads {
            let block = &src[kv * hd..(kv + 1) * hd];
            for j in 0..g {
                let h = kv * g + j;
                dst[h * hd..(h + 1) * hd].copy_from_slice(block);
            }
        }
    }
    Ok(out)
}

/// Pruned attention: `H + α · replicate(norm(H)·W_V) · W_O`.
///
/// `norm_gain` is the layer's pre-attention RMSNorm gain; `None` feeds `H`
/// to `W_V` unnormalized. Cost is linear in sequence length. With `alpha == 0`
/// the value path is not evaluated at all.
pub fn skipped_attention(
    h: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    norm_gain: Option<&[f32]>,
    alpha: f32,
    config: &ModelConfig,
) -> Result<Matrix> {
    let n = h.rows();
    h.expect_shape((n, config.hidden_size), "hidden state")?;
    wv.expect_shape((config.hidden_size, config.kv_dim()), "W_V")?;
    wo.expect_shape((config.q_dim(), config.hidden_size), "W_O")?;
    if !alpha.is_finite() {
        return Err(HarpError::contract(format!("alpha {alpha} is not finite")));
    }
    if alpha == 0.0 {
        return Ok(h.clone());
    }
    let update = skipped_update(h, wv, wo, norm_gain, config)?;
    let mut out = h.clone();
    for (o, &u) in out.as_mut_slice().iter_mut().zip(update.as_slice()) {
        *o += alpha * u;
    }
    Ok(out)
}

/// The unscaled residual update of the skipped path.
pub(crate) fn skipped_update(
    h: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    norm_gain: Option<&[f32]>,
    config: &ModelConfig,
) -> Result<Matrix> {
    let v = match norm_gain {
        Some(gain) => rms_norm(h, gain)?.matmul(wv)?,
        None => h.matmul(wv)?,
    };
    let rep = replicate_kv(&v, config)?;
    let mut update = Matrix::zeros(h.rows(), config.hidden_size);
    matmul_into(&rep, wo, &mut update);
    Ok(update)
}
