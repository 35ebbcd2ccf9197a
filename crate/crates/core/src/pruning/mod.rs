//! Layer selection and the top-down rescaling search.

mod metrics;
mod search;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{HarpError, Result};

pub use metrics::{
    bi_score, central_difference, hessian_importance, layer_importance_report,
    similarity_score, LayerImportance, LayerImportanceReport, MetricsConfig,
};
pub use search::{search_alpha, SearchConfig, SearchOutcome, TraceRow};

pub const SCHEDULE_FORMAT_VERSION: u32 = 1;

/// How the pruned layer set was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TopP,
    BottomP,
    Hessian,
    Similarity,
    Explicit,
}

impl Strategy {
    pub fn needs_corpus(self) -> bool {
        matches!(self, Strategy::Hessian | Strategy::Similarity)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::TopP => "top-p",
            Strategy::BottomP => "bottom-p",
            Strategy::Hessian => "hessian",
            Strategy::Similarity => "similarity",
            Strategy::Explicit => "explicit",
        })
    }
}

impl FromStr for Strategy {
    type Err = HarpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "top-p" | "top" => Ok(Strategy::TopP),
            "bottom-p" | "bottom" => Ok(Strategy::BottomP),
            "hessian" => Ok(Strategy::Hessian),
            "similarity" => Ok(Strategy::Similarity),
            "explicit" => Ok(Strategy::Explicit),
            other => Err(HarpError::Input(format!("unknown strategy {other:?}"))),
        }
    }
}

/// The set of layers whose attention is skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Sorted ascending, unique.
    layers: Vec<usize>,
    strategy: Strategy,
}

impl PruneSpec {
    pub fn empty() -> Self {
        PruneSpec { layers: Vec::new(), strategy: Strategy::Explicit }
    }

    pub fn new(strategy: Strategy, mut layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        layers.sort_unstable();
        let before = layers.len();
        layers.dedup();
        if layers.len() != before {
            return Err(HarpError::contract("duplicate layer index in prune spec"));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l >= num_layers) {
            return Err(HarpError::contract(format!(
                "layer {bad} out of range for {num_layers} layers"
            )));
        }
        let p = layers.len();
        match strategy {
            Strategy::TopP if layers != ((num_layers - p)..num_layers).collect::<Vec<_>>() => {
                return Err(HarpError::contract("top-p spec must be the highest P layers"));
            }
            Strategy::BottomP if layers != (0..p).collect::<Vec<_>>() => {
                return Err(HarpError::contract("bottom-p spec must be the lowest P layers"));
            }
            _ => {}
        }
        Ok(PruneSpec { layers, strategy })
    }

    pub fn top(num_layers: usize, p: usize) -> Result<Self> {
        check_count(p, num_layers)?;
        Self::new(Strategy::TopP, ((num_layers - p)..num_layers).collect(), num_layers)
    }

    pub fn bottom(num_layers: usize, p: usize) -> Result<Self> {
        check_count(p, num_layers)?;
        Self::new(Strategy::BottomP, (0..p).collect(), num_layers)
    }

    #[cfg(test)]
    pub(crate) fn explicit_unchecked(layers: Vec<usize>) -> Self {
        PruneSpec { layers, strategy: Strategy::Explicit }
    }

    /// Ascending layer indices.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Layer indices from the top of the stack down, matching schedule order.
    pub fn top_down(&self) -> Vec<usize> {
        self.layers.iter().rev().copied().collect()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }
}

fn check_count(p: usize, num_layers: usize) -> Result<()> {
    if p > num_layers {
        return Err(HarpError::contract(format!("cannot prune {p} of {num_layers} layers")));
    }
    Ok(())
}

/// Per-layer rescaling factors, ordered top-down: `alphas[i]` belongs to
/// `layer_indices[i]`, which for a top-P spec is layer `L-1-i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub format_version: u32,
    pub layer_indices: Vec<usize>,
    pub alphas: Vec<f32>,
    pub grid: Vec<f32>,
    pub corpus_digest: String,
    pub checkpoint_digest: String,
}

impl AlphaSchedule {
    /// Every pruned layer at the search initialization value 1.0.
    pub fn ones(spec: &PruneSpec) -> Self {
        AlphaSchedule {
            format_version: SCHEDULE_FORMAT_VERSION,
            layer_indices: spec.top_down(),
            alphas: vec![1.0; spec.len()],
            grid: Vec::new(),
            corpus_digest: String::new(),
            checkpoint_digest: String::new(),
        }
    }

    /// Reconstructs the explicit prune spec the schedule applies to.
    pub fn prune_spec(&self, num_layers: usize) -> Result<PruneSpec> {
        let spec = PruneSpec::new(Strategy::Explicit, self.layer_indices.clone(), num_layers)?;
        if spec.top_down() != self.layer_indices {
            return Err(HarpError::contract("schedule layer_indices must be in top-down order"));
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SCHEDULE_FORMAT_VERSION {
            return Err(HarpError::Input(format!(
                "unsupported schedule format_version {}",
                self.format_version
            )));
        }
        if self.alphas.len() != self.layer_indices.len() {
            return Err(HarpError::contract("schedule has one alpha per layer"));
        }
        for &a in &self.alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(HarpError::contract(format!("alpha {a} outside [0, 1]")));
            }
            if !self.grid.is_empty() && !self.grid.contains(&a) {
                return Err(HarpError::contract(format!("alpha {a} not in the search grid")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let schedule: AlphaSchedule = serde_json::from_str(s)?;
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Picks `p` layers with the given strategy. Data-driven strategies rank
/// layers by ascending metric value, ties going to the higher layer index.
pub fn select_layers(
    strategy: Strategy,
    p: usize,
    checkpoint: &Checkpoint,
    corpus: Option<&Corpus>,
    metrics: &MetricsConfig,
) -> Result<PruneSpec> {
    let num_layers = checkpoint.config.num_layers;
    check_count(p, num_layers)?;
    match strategy {
        Strategy::TopP => PruneSpec::top(num_layers, p),
        Strategy::BottomP => PruneSpec::bottom(num_layers, p),
        Strategy::Explicit => {
            Err(HarpError::contract("explicit specs are built directly, not selected"))
        }
        Strategy::Hessian | Strategy::Similarity => {
            let corpus = corpus.ok_or_else(|| {
                HarpError::contract(format!("strategy {strategy} requires a corpus"))
            })?;
            if p == 0 {
                return Ok(PruneSpec { layers: Vec::new(), strategy });
            }
            let report = layer_importance_report(checkpoint, corpus, metrics)?;
            let scores: Vec<f64> = report
                .records
                .iter()
                .map(|r| match strategy {
                    Strategy::Hessian => r.hessian_importance,
                    _ => r.similarity_score,
                })
                .collect();
            let chosen = lowest_p(&scores, p);
            PruneSpec::new(strategy, chosen, num_layers)
        }
    }
}

/// Indices of the `p` smallest scores; equal scores prefer the higher index.
pub(crate) fn lowest_p(scores: &[f64], p: usize) -> Vec<usize> {
    let mut order = rank_order(scores);
    order.truncate(p);
    order.sort_unstable();
    order
}

/// Layer indices sorted by ascending score, ties toward the higher index.
pub(crate) fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    idx
}
