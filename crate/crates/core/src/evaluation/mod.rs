//! Perplexity and representation/attention diagnostics.

mod diagnostics;
mod perplexity;

pub use diagnostics::{
    attention_entropy, causal_attention_probs, diagnose, dm_distance, frobenius_ratio,
    sim_metric, DiagnosticsRecord,
};
pub use perplexity::{perplexity, Evaluator, PerplexityResult, Window};
