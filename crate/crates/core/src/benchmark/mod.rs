//! Wall-clock latency of dense vs pruned forward passes across sequence lengths.

mod report;

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::checkpoint::Checkpoint;
use crate::error::{HarpError, Result};
use crate::model::{forward, CaptureFlags, LayerPlan};
use crate::pruning::PruneSpec;

pub use report::{emit_report, ReportFiles, CSV_HEADER};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub label: String,
    pub seq_lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    /// Seeds the random token inputs shared by both variants.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            label: "model".into(),
            seq_lengths: vec![128, 256, 512, 1024],
            repeats: 10,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dense,
    Pruned,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dense => "dense",
            Variant::Pruned => "pruned",
        })
    }
}

/// Summary statistics of repeated timings, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub repeats: usize,
    pub mean_s: f64,
    pub std_s: f64,
    /// Half-width of the 95% t-interval of the mean.
    pub ci95_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub label: String,
    pub seq_len: usize,
    pub variant: Variant,
    pub timing: std::result::Result<Timing, String>,
    /// Dense mean over pruned mean at this length, when both succeeded.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub points: Vec<BenchPoint>,
}

impl BenchResult {
    pub fn speedup(&self, seq_len: usize) -> Option<f64> {
        self.points.iter().find(|p| p.seq_len == seq_len).and_then(|p| p.speedup)
    }

    /// Speedups in ascending sequence-length order, skipping failed lengths.
    pub fn speedups(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .points
            .iter()
            .filter(|p| p.variant == Variant::Dense)
            .filter_map(|p| p.speedup.map(|s| (p.seq_len, s)))
            .collect();
        out.sort_by_key(|&(n, _)| n);
        out
    }
}

pub fn summarize(samples: &[f64]) -> Result<Timing> {
    let n = samples.len();
    if n < 2 {
        return Err(HarpError::contract("need at least two samples"));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| HarpError::contract(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(Timing { repeats: n, mean_s: mean, std_s: std, ci95_s: t * std / (n as f64).sqrt() })
}

fn time_variant(
    checkpoint: &Checkpoint,
    tokens: &[u32],
    plan: &LayerPlan,
    cfg: &BenchConfig,
) -> std::result::Result<Timing, String> {
    let run = || -> Result<Timing> {
        for _ in 0..cfg.warmup {
            forward(checkpoint, tokens, plan, CaptureFlags::default())?;
        }
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let out = forward(checkpoint, tokens, plan, CaptureFlags::default())?;
            samples.push(start.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        summarize(&samples)
    };
    match catch_unwind(AssertUnwindSafe(run)) {
        Ok(Ok(t)) => Ok(t),
        Ok(Err(e)) => Err(e.to_string()),
        Err(_) => Err("forward pass panicked".into()),
    }
}

/// Times dense and pruned forward passes at every length. A failing length is
/// recorded in its point and the run continues.
pub fn run_bench(
    checkpoint: &Checkpoint,
    spec: &PruneSpec,
    alphas: &[f32],
    cfg: &BenchConfig,
) -> Result<BenchResult> {
    if cfg.repeats < 3 {
        return Err(HarpError::contract(format!("repeats must be >= 3, got {}", cfg.repeats)));
    }
    if cfg.seq_lengths.is_empty() {
        return Err(HarpError::contract("no sequence lengths to benchmark"));
    }
    let dense = LayerPlan::dense(checkpoint.config.num_layers);
    let pruned = LayerPlan::new(&checkpoint.config, spec, alphas)?;
    let mut result = BenchResult::default();
    for &n in &cfg.seq_lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (n as u64).rotate_left(32));
        let vocab = checkpoint.config.vocab_size as u32;
        let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let d = time_variant(checkpoint, &tokens, &dense, cfg);
        let p = time_variant(checkpoint, &tokens, &pruned, cfg);
        let speedup = match (&d, &p) {
            (Ok(d), Ok(p)) => Some(d.mean_s / p.mean_s),
            _ => None,
        };
        for (variant, timing) in [(Variant::Dense, d), (Variant::Pruned, p)] {
            result.points.push(BenchPoint { label: cfg.label.clone(), seq_len: n, variant, timing, speedup });
        }
    }
    Ok(result)
}
