//! Greedy top-down grid search for per-layer rescaling factors.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{HarpError, Result};
use crate::evaluation::Evaluator;
use crate::model::LayerPlan;

use super::{AlphaSchedule, PruneSpec, SCHEDULE_FORMAT_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    /// Candidate values; swept in ascending order.
    pub grid: Vec<f32>,
    pub window_size: usize,
    pub stride: usize,
}

impl SearchConfig {
    /// `{0.0, 0.1, ..., 1.0}`.
    pub fn default_grid() -> Vec<f32> {
        (0..=10).map(|i| i as f32 / 10.0).collect()
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { grid: Self::default_grid(), window_size: 256, stride: 256 }
    }
}

/// One perplexity evaluation of the sweep. `ppl` is `None` when the
/// candidate failed numerically and was discarded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: usize,
    pub alpha: f32,
    pub ppl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub schedule: AlphaSchedule,
    /// Rows in evaluation order: layers top-down, grid ascending.
    pub trace: Vec<TraceRow>,
    /// Perplexity of the returned schedule; `None` when nothing was pruned.
    pub best_ppl: Option<f64>,
}

fn normalized_grid(grid: &[f32]) -> Result<Vec<f32>> {
    if grid.is_empty() {
        return Err(HarpError::contract("empty alpha grid"));
    }
    if let Some(bad) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(HarpError::contract(format!("grid value {bad} outside [0, 1]")));
    }
    let mut g = grid.to_vec();
    g.sort_by(f32::total_cmp);
    g.dedup();
    Ok(g)
}

/// Starting from all-ones, fixes each pruned layer's alpha from the top down
/// to the grid value with strictly lowest perplexity (first one wins ties),
/// holding higher layers at their chosen values and lower ones at 1.0.
///
/// Layers below the one being swept do not depend on its alpha, so their
/// output is computed once per layer and reused for every candidate.
pub fn search_alpha(
    checkpoint: &Checkpoint,
    spec: &PruneSpec,
    corpus: &Corpus,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    let grid = normalized_grid(&config.grid)?;
    let cfg = &checkpoint.config;
    corpus.check_vocab(cfg.vocab_size)?;
    let evaluator = Evaluator::new(corpus, config.window_size, config.stride, cfg.max_seq_len)?;
    let layers = spec.top_down();
    let mut alphas = vec![1.0f32; layers.len()];
    let mut trace = Vec::with_capacity(layers.len() * grid.len());
    let mut best_ppl = None;

    for (slot, &layer) in layers.iter().enumerate() {
        let base_plan = LayerPlan::new(cfg, spec, &alphas)?;
        let cache = evaluator.hidden_at(checkpoint, &base_plan, layer)?;
        let results: Vec<Option<f64>> = grid
            .par_iter()
            .map(|&alpha| {
                let mut candidate = alphas.clone();
                candidate[slot] = alpha;
                let plan = LayerPlan::new(cfg, spec, &candidate)?;
                match evaluator.perplexity_from(checkpoint, &plan, layer, &cache) {
                    Ok(r) if r.ppl.is_finite() => Ok(Some(r.ppl)),
                    Ok(_) | Err(HarpError::Numeric { .. }) => {
                        warn!("layer {layer}: alpha {alpha} produced a non-finite perplexity; discarded");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;

        let mut best: Option<(f32, f64)> = None;
        for (&alpha, ppl) in grid.iter().zip(&results) {
            trace.push(TraceRow { layer, alpha, ppl: *ppl });
            if let Some(p) = *ppl {
                if best.is_none_or(|(_, b)| p < b) {
                    best = Some((alpha, p));
                }
            }
        }
        let (alpha, ppl) = best.ok_or_else(|| HarpError::Search {
            layer,
            reason: "every grid candidate failed".into(),
        })?;
        alphas[slot] = alpha;
        best_ppl = Some(ppl);
    }

    Ok(SearchOutcome {
        schedule: AlphaSchedule {
            format_version: SCHEDULE_FORMAT_VERSION,
            layer_indices: layers,
            alphas,
            grid,
            corpus_digest: corpus.digest().to_string(),
            checkpoint_digest: checkpoint.digest(),
        },
        trace,
        best_ppl,
    })
}
