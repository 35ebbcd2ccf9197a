//! Layer-importance metrics used to rank layers for pruning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{HarpError, Result};
use crate::evaluation::{sim_metric, Evaluator};
use crate::model::{apply_layer, embed, AttentionPath, LayerPlan};
use crate::tensor::{cosine, Matrix};

use super::rank_order;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    pub window_size: usize,
    pub stride: usize,
    /// Only the first `max_tokens` tokens of the corpus are used.
    pub max_tokens: Option<usize>,
    /// Relative step of the central difference.
    pub epsilon: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { window_size: 128, stride: 128, max_tokens: Some(2048), epsilon: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub layer: usize,
    pub bi_score: f64,
    pub similarity_score: f64,
    pub hessian_importance: f64,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportanceReport {
    pub records: Vec<LayerImportance>,
}

pub const METRIC_NAMES: [&str; 4] = ["bi_score", "similarity_score", "hessian_importance", "sim"];

impl LayerImportanceReport {
    pub fn values(&self, metric: &str) -> Option<Vec<f64>> {
        let pick: fn(&LayerImportance) -> f64 = match metric {
            "bi_score" => |r| r.bi_score,
            "similarity_score" => |r| r.similarity_score,
            "hessian_importance" => |r| r.hessian_importance,
            "sim" => |r| r.sim,
            _ => return None,
        };
        Some(self.records.iter().map(pick).collect())
    }

    /// `ranks[layer]`: 0 for the least important layer under `metric`.
    pub fn ranks(&self, metric: &str) -> Option<Vec<usize>> {
        let values = self.values(metric)?;
        let mut ranks = vec![0; values.len()];
        for (rank, layer) in rank_order(&values).into_iter().enumerate() {
            ranks[layer] = rank;
        }
        Some(ranks)
    }

    pub fn rank_table(&self) -> BTreeMap<&'static str, Vec<usize>> {
        METRIC_NAMES.iter().map(|&m| (m, self.ranks(m).expect("known metric"))).collect()
    }
}

fn cosine_sum(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(HarpError::contract(format!(
            "cosine between {:?} and {:?} states",
            a.shape(),
            b.shape()
        )));
    }
    let mut sum = 0.0;
    for t in 0..a.rows() {
        sum += cosine(a.row(t), b.row(t))
            .ok_or_else(|| HarpError::contract(format!("token {t} has a zero-norm state")))?;
    }
    Ok(sum)
}

/// `1 − mean_t cos(H_l[t], H_{l+1}[t])`, in `[0, 2]`.
pub fn bi_score(h_l: &Matrix, h_next: &Matrix) -> Result<f64> {
    if h_l.rows() == 0 {
        return Err(HarpError::contract("bi_score of an empty state"));
    }
    Ok(1.0 - cosine_sum(h_l, h_next)? / h_l.rows() as f64)
}

fn metric_evaluator<'c>(corpus: &'c Corpus, checkpoint: &Checkpoint, cfg: &MetricsConfig) -> Result<Evaluator<'c>> {
    Evaluator::new(corpus, cfg.window_size, cfg.stride, checkpoint.config.max_seq_len)
}

fn limited(corpus: &Corpus, cfg: &MetricsConfig) -> Corpus {
    match cfg.max_tokens {
        Some(n) => corpus.truncated(n),
        None => corpus.clone(),
    }
}

/// `1 − mean cos(X_A, Y_A)` where `X_A` is the attention sub-block input and
/// `Y_A = X_A + Attention(norm(X_A))`, averaged over all corpus tokens.
pub fn similarity_score(
    checkpoint: &Checkpoint,
    plan: &LayerPlan,
    layer: usize,
    corpus: &Corpus,
    cfg: &MetricsConfig,
) -> Result<f64> {
    if layer >= checkpoint.config.num_layers {
        return Err(HarpError::contract(format!("layer {layer} out of range")));
    }
    if plan.path(layer) != AttentionPath::Full {
        return Err(HarpError::contract(format!("layer {layer} is pruned")));
    }
    let corpus = limited(corpus, cfg);
    let ev = metric_evaluator(&corpus, checkpoint, cfg)?;
    let inputs = ev.hidden_at(checkpoint, plan, layer)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for x in &inputs {
        let y = apply_layer(checkpoint, layer, x, plan, false)?.after_attention;
        sum += cosine_sum(x, &y)?;
        count += x.rows();
    }
    Ok(1.0 - sum / count as f64)
}

/// `[f(1+ε) − f(1−ε)] / 2ε`: the derivative of `f` at 1 along a relative
/// scaling, i.e. `Σ ∂L/∂W · W` when `f(c)` is the loss at weights `c·W`.
pub fn central_difference<F>(mut f: F, epsilon: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (hi, lo) = (f(1.0 + epsilon)?, f(1.0 - epsilon)?);
    let d = (hi - lo) / (2.0 * epsilon);
    if !d.is_finite() {
        return Err(HarpError::Numeric { layer: None, what: "non-finite finite difference".into() });
    }
    Ok(d)
}

#[derive(Clone, Copy)]
enum Projection {
    Q,
    K,
    V,
}

fn projection_mut(ck: &mut Checkpoint, layer: usize, p: Projection) -> Option<&mut Matrix> {
    let w = &mut ck.layers[layer];
    match p {
        Projection::Q => w.wq.as_mut(),
        Projection::K => w.wk.as_mut(),
        Projection::V => Some(&mut w.wv),
    }
}

/// `Σ_{s∈{q,k,v}} (Σ_ij ∂L/∂W^s_ij · W^s_ij)²`, each inner sum taken as the
/// central-difference derivative of the mean cross-entropy along `W^s`.
pub fn hessian_importance(
    checkpoint: &Checkpoint,
    plan: &LayerPlan,
    layer: usize,
    corpus: &Corpus,
    cfg: &MetricsConfig,
) -> Result<f64> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon <= 0.5) {
        return Err(HarpError::contract(format!("epsilon {} outside (0, 0.5]", cfg.epsilon)));
    }
    if layer >= checkpoint.config.num_layers {
        return Err(HarpError::contract(format!("layer {layer} out of range")));
    }
    let corpus = limited(corpus, cfg);
    let ev = metric_evaluator(&corpus, checkpoint, cfg)?;
    let cache = ev.hidden_at(checkpoint, plan, layer)?;
    let mut work = checkpoint.clone();
    let mut total = 0.0;
    for p in [Projection::Q, Projection::K, Projection::V] {
        let Some(original) = projection_mut(&mut work, layer, p).map(|m| m.clone()) else {
            return Err(HarpError::contract(format!("layer {layer} has no Q/K weights")));
        };
        let mut loss_at = |c: f32| -> Result<f64> {
            *projection_mut(&mut work, layer, p).expect("present") = original.scale(c);
            let r = ev.perplexity_from(&work, plan, layer, &cache);
            r.map(|r| r.mean_nll).map_err(|e| match e {
                HarpError::Numeric { what, .. } => HarpError::Numeric { layer: Some(layer), what },
                other => other,
            })
        };
        // Difference over the scale factors actually representable in f32.
        let (hi, lo) = ((1.0 + cfg.epsilon) as f32, (1.0 - cfg.epsilon) as f32);
        let d = (loss_at(hi)? - loss_at(lo)?) / (hi as f64 - lo as f64);
        if !d.is_finite() {
            return Err(HarpError::Numeric { layer: Some(layer), what: "non-finite derivative".into() });
        }
        *projection_mut(&mut work, layer, p).expect("present") = original;
        total += d * d;
    }
    Ok(total)
}

/// BI, attention similarity, Hessian importance and Sim for every layer of
/// the dense model.
pub fn layer_importance_report(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    cfg: &MetricsConfig,
) -> Result<LayerImportanceReport> {
    let num_layers = checkpoint.config.num_layers;
    let plan = LayerPlan::dense(num_layers);
    let limited_corpus = limited(corpus, cfg);
    let ev = metric_evaluator(&limited_corpus, checkpoint, cfg)?;

    let mut bi = vec![0.0; num_layers];
    let mut sa = vec![0.0; num_layers];
    let mut sim = vec![0.0; num_layers];
    let (mut tokens, mut sim_windows) = (0usize, 0usize);
    for w in ev.windows() {
        let mut h = embed(checkpoint, ev.window_tokens(w))?;
        tokens += h.rows();
        let use_sim = h.rows() >= 2;
        sim_windows += use_sim as usize;
        for layer in 0..num_layers {
            let block = apply_layer(checkpoint, layer, &h, &plan, false)?;
            bi[layer] += cosine_sum(&h, &block.out)?;
            sa[layer] += cosine_sum(&h, &block.after_attention)?;
            if use_sim {
                sim[layer] += sim_metric(&h)?;
            }
            h = block.out;
        }
    }

    let mut records = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        records.push(LayerImportance {
            layer,
            bi_score: 1.0 - bi[layer] / tokens as f64,
            similarity_score: 1.0 - sa[layer] / tokens as f64,
            hessian_importance: hessian_importance(checkpoint, &plan, layer, corpus, cfg)?,
            sim: if sim_windows > 0 { sim[layer] / sim_windows as f64 } else { 1.0 },
        });
    }
    Ok(LayerImportanceReport { records })
}
