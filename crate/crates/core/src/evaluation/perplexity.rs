use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{HarpError, Result};
use crate::model::{apply_layer, embed, output_logits, LayerPlan};
use crate::pruning::PruneSpec;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub ppl: f64,
    pub mean_nll: f64,
    pub token_count: usize,
    pub window_size: usize,
    pub stride: usize,
    /// Summed NLL (nats) of the targets scored in each window.
    pub window_nll: Vec<f64>,
}

/// One evaluation window: input tokens `begin..end` predict the tokens at
/// `begin+1..=end`; only targets `first_scored..=end` count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub begin: usize,
    pub end: usize,
    pub first_scored: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.begin
    }

    pub fn scored(&self) -> usize {
        self.end + 1 - self.first_scored
    }
}

/// Windows over a corpus of `len` tokens: the first window scores all of its
/// predictions, each later one advances by `stride` and scores only its last
/// `stride` positions, so every token after the first is scored exactly once.
pub(crate) fn plan_windows(len: usize, window_size: usize, stride: usize) -> Vec<Window> {
    let last = len - 1;
    let mut windows = Vec::new();
    let mut end = window_size.min(last);
    let mut scored_to = 0;
    loop {
        let begin = end.saturating_sub(window_size);
        windows.push(Window { begin, end, first_scored: scored_to + 1 });
        scored_to = end;
        if end == last {
            break;
        }
        end = (end + stride).min(last);
    }
    windows
}

/// Windowed teacher-forced evaluation of one corpus, reusable across models
/// and layer plans.
pub struct Evaluator<'c> {
    corpus: &'c Corpus,
    windows: Vec<Window>,
    window_size: usize,
    stride: usize,
}

impl<'c> Evaluator<'c> {
    pub fn new(corpus: &'c Corpus, window_size: usize, stride: usize, max_seq_len: usize) -> Result<Self> {
        if corpus.len() < 2 {
            return Err(HarpError::contract("perplexity needs at least 2 tokens"));
        }
        if window_size == 0 || window_size > max_seq_len {
            return Err(HarpError::contract(format!(
                "window_size {window_size} must be in 1..={max_seq_len}"
            )));
        }
        if stride == 0 || stride > window_size {
            return Err(HarpError::contract(format!(
                "stride {stride} must be in 1..={window_size}"
            )));
        }
        Ok(Evaluator { corpus, windows: plan_windows(corpus.len(), window_size, stride), window_size, stride })
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    pub fn window_tokens(&self, w: &Window) -> &[u32] {
        &self.corpus.tokens()[w.begin..w.end]
    }

    pub fn perplexity(&self, checkpoint: &Checkpoint, plan: &LayerPlan) -> Result<PerplexityResult> {
        let sums = self
            .windows
            .par_iter()
            .map(|w| {
                let h = embed(checkpoint, self.window_tokens(w))?;
                self.window_nll(checkpoint, plan, 0, h, w)
            })
            .collect::<Result<Vec<f64>>>()?;
        self.finish(sums)
    }

    /// Input of `layer` for every window under `plan`. Valid for any plan
    /// that agrees with `plan` on layers below `layer`.
    pub fn hidden_at(&self, checkpoint: &Checkpoint, plan: &LayerPlan, layer: usize) -> Result<Vec<Matrix>> {
        self.windows
            .par_iter()
            .map(|w| {
                let mut h = embed(checkpoint, self.window_tokens(w))?;
                for l in 0..layer {
                    h = apply_layer(checkpoint, l, &h, plan, false)?.out;
                }
                Ok(h)
            })
            .collect()
    }

    /// Perplexity resumed from cached layer inputs; bit-identical to
    /// [`Evaluator::perplexity`] when the cache was built under the same plan prefix.
    pub fn perplexity_from(
        &self,
        checkpoint: &Checkpoint,
        plan: &LayerPlan,
        layer: usize,
        hidden: &[Matrix],
    ) -> Result<PerplexityResult> {
        if hidden.len() != self.windows.len() {
            return Err(HarpError::contract("cached hidden states do not match the windows"));
        }
        let sums = self
            .windows
            .par_iter()
            .zip(hidden.par_iter())
            .map(|(w, h)| self.window_nll(checkpoint, plan, layer, h.clone(), w))
            .collect::<Result<Vec<f64>>>()?;
        self.finish(sums)
    }

    fn window_nll(
        &self,
        checkpoint: &Checkpoint,
        plan: &LayerPlan,
        start_layer: usize,
        mut h: Matrix,
        w: &Window,
    ) -> Result<f64> {
        for l in start_layer..checkpoint.config.num_layers {
            h = apply_layer(checkpoint, l, &h, plan, false)?.out;
        }
        let logits = output_logits(checkpoint, &h)?;
        let tokens = self.corpus.tokens();
        let mut sum = 0.0f64;
        for target in w.first_scored..=w.end {
            sum += nll(logits.row(target - 1 - w.begin), tokens[target] as usize);
        }
        if !sum.is_finite() {
            return Err(HarpError::Numeric { layer: None, what: "non-finite loss".into() });
        }
        Ok(sum)
    }

    fn finish(&self, window_nll: Vec<f64>) -> Result<PerplexityResult> {
        let token_count = self.corpus.len() - 1;
        let total: f64 = window_nll.iter().sum();
        let mean_nll = total / token_count as f64;
        let ppl = mean_nll.exp();
        if !ppl.is_finite() {
            return Err(HarpError::Numeric { layer: None, what: "non-finite perplexity".into() });
        }
        Ok(PerplexityResult {
            ppl,
            mean_nll,
            token_count,
            window_size: self.window_size,
            stride: self.stride,
            window_nll,
        })
    }
}

/// Negative log-probability (nats) of `target` under softmax(`logits`).
pub(crate) fn nll(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln() - logits[target] as f64
}

pub fn perplexity(
    checkpoint: &Checkpoint,
    spec: &PruneSpec,
    alphas: &[f32],
    corpus: &Corpus,
    window_size: usize,
    stride: usize,
) -> Result<PerplexityResult> {
    let plan = LayerPlan::new(&checkpoint.config, spec, alphas)?;
    Evaluator::new(corpus, window_size, stride, checkpoint.config.max_seq_len)?.perplexity(checkpoint, &plan)
}
