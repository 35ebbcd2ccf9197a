//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use harp_core::benchmark::{run_bench, BenchConfig};
use harp_core::checkpoint::{generate_model, strip_report_for_config, Checkpoint};
use harp_core::corpus::synthetic_text;
use harp_core::evaluation::{
    attention_entropy, causal_attention_probs, frobenius_ratio, sim_metric, Evaluator,
};
use harp_core::model::{ffn_block, gqa_attention_with, skipped_attention, AttentionOptions};
use harp_core::pruning::central_difference;
use harp_core::tensor::rms_norm;
use harp_core::{
    forward, AlphaSchedule, AttentionPath, CaptureFlags, Corpus, LayerPlan, Matrix, ModelConfig, PruneSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn harp(args: &[&str]) -> Result<(), String> {
    match harp_cli::run(std::iter::once("harp").chain(args.iter().copied())) {
        0 => Ok(()),
        code => Err(format!("harp {} exited with {code}", args[0])),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    diff.sqrt() / b.frobenius_norm()
}

/// 1. Forced diagonal one-hot attention equals the α=1 skipped path.
fn one_hot_equivalence() -> Outcome {
    let start = Instant::now();
    let ck = generate_model(&ModelConfig::desk(), 42).map_err(|e| e.to_string())?;
    let tokens: Vec<u32> = synthetic_text(128, 3).into_iter().map(u32::from).collect();
    let hidden = forward(&ck, &tokens, &LayerPlan::dense(8), CaptureFlags { hidden: true, attention: false })
        .map_err(|e| e.to_string())?
        .hidden
        .unwrap();
    let mut worst = 0.0f64;
    for layer in 0..8 {
        let (h, w) = (&hidden[layer], &ck.layers[layer]);
        let x = rms_norm(h, &w.attn_norm).unwrap();
        let opts = AttentionOptions { capture: false, diagonal_bias: Some(1e9) };
        let att = gqa_attention_with(&x, w, &ck.config, &opts).unwrap();
        let forced = ffn_block(&h.add(&att.out).unwrap(), w, &ck.config).unwrap();
        let skipped = skipped_attention(h, &w.wv, &w.wo, Some(&w.attn_norm), 1.0, &ck.config).unwrap();
        let skipped = ffn_block(&skipped, w, &ck.config).unwrap();
        worst = worst.max(rel_frobenius(&forced, &skipped));
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-4 && elapsed < Duration::from_secs(5),
        format!("max relative error {worst:.2e} over 8 layers, {:.2}s", elapsed.as_secs_f64()),
    )
}

struct TraceRow {
    layer: usize,
    alpha: f32,
    ppl: Option<f64>,
}

fn read_trace(path: &Path) -> Result<Vec<TraceRow>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        rows.push(TraceRow {
            layer: rec[0].parse().map_err(|_| "bad layer")?,
            alpha: rec[1].parse().map_err(|_| "bad alpha")?,
            ppl: if rec[2].is_empty() { None } else { Some(rec[2].parse().map_err(|_| "bad ppl")?) },
        });
    }
    Ok(rows)
}

struct SearchRun {
    model: PathBuf,
    corpus: PathBuf,
    out: PathBuf,
}

/// 2. P=3 search on a seeded model and a 32 KiB corpus never loses to α=1.
fn greedy_dominance(run: &SearchRun) -> Outcome {
    let start = Instant::now();
    harp(&[
        "search-alpha", "--ckpt", s(&run.model), "--corpus", s(&run.corpus), "--layers", "3",
        "--window", "256", "--stride", "256", "--out", s(&run.out),
    ])?;
    let elapsed = start.elapsed();
    let trace = read_trace(&run.out.join("trace.csv"))?;
    let top = trace.first().ok_or("empty trace")?.layer;
    let baseline = trace
        .iter()
        .find(|r| r.layer == top && r.alpha == 1.0)
        .and_then(|r| r.ppl)
        .ok_or("no α=1 row for the top layer")?;
    let last = trace.last().unwrap().layer;
    let best = trace.iter().filter(|r| r.layer == last).filter_map(|r| r.ppl).fold(f64::INFINITY, f64::min);
    check(
        trace.len() == 33 && best <= baseline && elapsed < Duration::from_secs(120),
        format!("{} trace rows, ppl {best:.4} vs α=1 {baseline:.4}, {:.1}s", trace.len(), elapsed.as_secs_f64()),
    )
}

/// 3. Brute-force re-evaluation of every candidate reproduces the schedule.
fn algorithm_fidelity(run: &SearchRun) -> Outcome {
    let ck = harp_core::checkpoint::load(&run.model).map_err(|e| e.to_string())?;
    let corpus = Corpus::from_file(&run.corpus).map_err(|e| e.to_string())?;
    let schedule = AlphaSchedule::from_json(&fs::read_to_string(run.out.join("schedule.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let trace = read_trace(&run.out.join("trace.csv"))?;
    let ev = Evaluator::new(&corpus, 256, 256, ck.config.max_seq_len).map_err(|e| e.to_string())?;

    let mut plan = LayerPlan::dense(ck.config.num_layers);
    for &l in &schedule.layer_indices {
        plan.set_path(l, AttentionPath::Skipped { alpha: 1.0 });
    }
    let mut order = Vec::new();
    for row in &trace {
        if order.last() != Some(&row.layer) {
            order.push(row.layer);
        }
    }
    if order != schedule.layer_indices {
        return Err(format!("trace order {order:?} vs schedule {:?}", schedule.layer_indices));
    }
    let mut chosen = Vec::new();
    let mut mismatches = 0;
    for &layer in &order {
        let mut best: Option<(f32, f64)> = None;
        for row in trace.iter().filter(|r| r.layer == layer) {
            plan.set_path(layer, AttentionPath::Skipped { alpha: row.alpha });
            let ppl = ev.perplexity(&ck, &plan).ok().map(|r| r.ppl);
            if ppl != row.ppl {
                mismatches += 1;
            }
            if let Some(p) = ppl {
                if best.is_none_or(|(_, b)| p < b) {
                    best = Some((row.alpha, p));
                }
            }
        }
        let (alpha, _) = best.ok_or(format!("no finite candidate for layer {layer}"))?;
        plan.set_path(layer, AttentionPath::Skipped { alpha });
        chosen.push(alpha);
    }
    check(
        chosen == schedule.alphas && mismatches == 0,
        format!("brute force {chosen:?} vs schedule {:?}, {mismatches} trace mismatches", schedule.alphas),
    )
}

fn one_hot_successor_model() -> Checkpoint {
    let cfg = ModelConfig {
        num_layers: 1,
        hidden_size: 256,
        ffn_size: 8,
        num_query_heads: 4,
        num_kv_heads: 2,
        head_dim: 64,
        vocab_size: 256,
        max_seq_len: 512,
        rope_base: 10000.0,
    };
    let mut ck = Checkpoint::zeros(&cfg).unwrap();
    ck.embedding = Matrix::identity(256);
    ck.final_norm = vec![10.0; 256];
    ck.layers[0].attn_norm = vec![1.0; 256];
    ck.layers[0].ffn_norm = vec![1.0; 256];
    let mut out = Matrix::zeros(256, 256);
    for t in 0..256 {
        out.set((t + 1) % 256, t, 1.0);
    }
    ck.output = Some(out);
    ck
}

/// 4. Uniform logits give V; a one-hot oracle gives ~1.
fn perplexity_calibration() -> Outcome {
    let mut uniform = generate_model(&ModelConfig::tiny(), 1).map_err(|e| e.to_string())?;
    uniform.output = Some(Matrix::zeros(256, 64));
    let mut worst = 0.0f64;
    for (len, seed) in [(2usize, 0u64), (777, 1), (4096, 2)] {
        let corpus = Corpus::from_text("u", &synthetic_text(len, seed)).unwrap();
        let ppl = Evaluator::new(&corpus, 256, 128, 1024).unwrap().perplexity(&uniform, &LayerPlan::dense(4)).unwrap().ppl;
        worst = worst.max((ppl / 256.0 - 1.0).abs());
    }
    let oracle = one_hot_successor_model();
    let bytes: Vec<u8> = (0..4096).map(|i| (i % 256) as u8).collect();
    let corpus = Corpus::from_text("successor", &bytes).unwrap();
    let ppl = Evaluator::new(&corpus, 256, 256, 512).unwrap().perplexity(&oracle, &LayerPlan::dense(1)).unwrap().ppl;
    check(
        worst < 1e-4 && ppl <= 1.0 + 1e-6,
        format!("uniform max rel dev {worst:.2e}, one-hot ppl 1+{:.2e}", ppl - 1.0),
    )
}

fn shared_row_plus_noise(n: usize, d: usize, delta: f32, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let c: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let mut h = Matrix::zeros(n, d);
    for i in 0..n {
        for (j, &cj) in c.iter().enumerate() {
            h.set(i, j, cj + delta * normal.sample(&mut rng));
        }
    }
    h
}

/// 5. Only one-hot attention preserves the Frobenius norm.
fn frobenius_probe() -> Outcome {
    let h = shared_row_plus_noise(32, 16, 1.0, 11);
    let identity = frobenius_ratio(&Matrix::identity(32), &h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut closest = f64::INFINITY;
    for _ in 0..100 {
        let mut q = Matrix::zeros(32, 8);
        let mut k = Matrix::zeros(32, 8);
        q.as_mut_slice().iter_mut().chain(k.as_mut_slice()).for_each(|v| *v = rng.random_range(-2.0..2.0));
        let a = causal_attention_probs(&q, &k).unwrap();
        closest = closest.min((frobenius_ratio(&a, &h).unwrap() - 1.0).abs());
    }
    check(identity == 1.0 && closest > 1e-6, format!("identity ratio {identity}, min |ratio−1| {closest:.3e} over 100"))
}

/// 6. Shrinking noise around a shared row raises Sim and attention entropy.
fn entropy_probe() -> Outcome {
    let (mut sims, mut ents) = (Vec::new(), Vec::new());
    for delta in [1.0, 0.1, 0.01] {
        let h = shared_row_plus_noise(64, 32, delta, 5);
        sims.push(sim_metric(&h).unwrap());
        ents.push(attention_entropy(&causal_attention_probs(&h, &h).unwrap()).unwrap());
    }
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
    check(
        increasing(&sims) && increasing(&ents) && ents[2] <= 1.0,
        format!("Sim {sims:.4?}, entropy {ents:.4?}"),
    )
}

/// 7. Central difference accuracy and second-order convergence.
fn finite_difference() -> Outcome {
    let w = 1.3f64;
    let exact = 2.0 * w * (w - 1.0);
    let d = central_difference(|c| Ok((c * w - 1.0).powi(2)), 1e-2).unwrap();
    let rel = ((d - exact) / exact).abs();
    // A quadratic has no truncation error, so the convergence order is
    // measured on a smooth non-polynomial loss.
    let loss = |c: f64| Ok(((c * 0.8).tanh() - 1.0).powi(2));
    let t = 0.8f64.tanh();
    let exact_s = 2.0 * (t - 1.0) * (1.0 - t * t) * 0.8;
    let pts: Vec<(f64, f64)> = [1e-1f64, 5e-2, 2.5e-2, 1.25e-2]
        .iter()
        .map(|&e| (e.ln(), (central_difference(loss, e).unwrap() - exact_s).abs().ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    check(rel <= 1e-3 && (1.7..=2.3).contains(&slope), format!("relative error {rel:.2e} at ε=1e-2, slope {slope:.3}"))
}

/// 8. Pruning the top half speeds up the forward pass, increasingly with N.
fn efficiency_trend() -> Outcome {
    let start = Instant::now();
    let ck = generate_model(&ModelConfig::desk(), 42).map_err(|e| e.to_string())?;
    let spec = PruneSpec::top(8, 4).unwrap();
    let cfg = BenchConfig {
        label: "desk".into(),
        seq_lengths: vec![128, 256, 512, 1024],
        repeats: 3,
        warmup: 1,
        seed: 0,
    };
    let result = run_bench(&ck, &spec, &[1.0; 4], &cfg).map_err(|e| e.to_string())?;
    let speedups = result.speedups();
    if speedups.len() != cfg.seq_lengths.len() {
        return Err(format!("only {} of {} lengths measured", speedups.len(), cfg.seq_lengths.len()));
    }
    let inversions = speedups.windows(2).filter(|w| w[1].1 < w[0].1).count();
    let last = speedups.last().unwrap().1;
    let elapsed = start.elapsed();
    let shown: Vec<String> = speedups.iter().map(|(n, s)| format!("{n}:{s:.3}")).collect();
    check(
        last > 1.0 && inversions <= 1 && elapsed < Duration::from_secs(300),
        format!("speedups [{}], {inversions} inversion(s), {:.1}s", shown.join(" "), elapsed.as_secs_f64()),
    )
}

/// 9. Q/K removal on 8 of 32 layers of the LLaMA3.1-8B shape: 3.3% ± 0.5pp.
fn parameter_accounting() -> Outcome {
    let cfg = ModelConfig::llama31_8b_shape();
    let spec = PruneSpec::top(cfg.num_layers, 8).unwrap();
    let report = strip_report_for_config(&cfg, spec.layers(), false).map_err(|e| e.to_string())?;
    let pct = 100.0 * report.ratio();
    check(
        (pct - 3.3).abs() <= 0.5,
        format!("{} of {} parameters removed = {pct:.3}% (target 3.3 ± 0.5)", report.removed_params, report.total_params),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

/// 10. Identical seeds and inputs give byte-identical outputs.
fn determinism(root: &Path) -> Outcome {
    let corpus = root.join("det_corpus.txt");
    fs::write(&corpus, synthetic_text(3000, 21)).unwrap();
    let out = root.join("det");
    let model = out.join("gen/model.harp");
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen-model", vec!["--config".into(), "tiny".into(), "--seed".into(), "9".into()]),
        ("search-alpha", vec!["--ckpt".into(), s(&model).into(), "--corpus".into(), s(&corpus).into(), "--layers".into(), "2".into(), "--window".into(), "128".into(), "--stride".into(), "64".into()]),
        ("eval", vec!["--ckpt".into(), s(&model).into(), "--corpus".into(), s(&corpus).into(), "--schedule".into(), s(&out.join("search-alpha/schedule.json")).into()]),
        ("metrics", vec!["--ckpt".into(), s(&model).into(), "--corpus".into(), s(&corpus).into(), "--max-tokens".into(), "512".into(), "--window".into(), "128".into(), "--stride".into(), "128".into()]),
    ];
    let mut runs: Vec<BTreeMap<String, BTreeMap<String, Vec<u8>>>> = Vec::new();
    for _ in 0..2 {
        let mut outputs = BTreeMap::new();
        let _ = fs::remove_dir_all(&out);
        for (cmd, args) in &steps {
            let dir = out.join(if *cmd == "gen-model" { "gen" } else { cmd });
            let mut argv: Vec<&str> = vec![cmd];
            argv.extend(args.iter().map(String::as_str));
            argv.extend(["--out", s(&dir)]);
            harp(&argv)?;
            outputs.insert(cmd.to_string(), dir_bytes(&dir));
        }
        runs.push(outputs);
    }
    let differing: Vec<String> = runs[0]
        .iter()
        .flat_map(|(cmd, files)| {
            let other = &runs[1][cmd];
            files.iter().filter(move |(f, b)| other.get(*f) != Some(b)).map(move |(f, _)| format!("{cmd}/{f}"))
        })
        .collect();
    let files: usize = runs[0].values().map(|f| f.len()).sum();
    check(differing.is_empty(), format!("{files} files compared, differing: {differing:?}"))
}

fn main() {
    // `cargo test` passes harness flags; a listing request must not run the suite.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // Pins manifest timestamps so reruns are byte-identical.
    std::env::set_var("SOURCE_DATE_EPOCH", "1700000000");
    let root = tempfile::tempdir().expect("tempdir");
    let corpus = root.path().join("corpus32k.txt");
    fs::write(&corpus, synthetic_text(32 * 1024, 2024)).unwrap();
    let model_dir = root.path().join("model");
    let run = SearchRun { model: model_dir.join("model.harp"), corpus, out: root.path().join("search") };

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("1 one-hot equivalence", one_hot_equivalence()));
    let gen = harp(&["gen-model", "--config", "tiny", "--seed", "42", "--out", s(&model_dir)]);
    let dominance = gen.and_then(|_| greedy_dominance(&run));
    let searched = dominance.is_ok();
    results.push(("2 greedy dominance", dominance));
    results.push((
        "3 search fidelity",
        if searched { algorithm_fidelity(&run) } else { Err("search did not complete".into()) },
    ));
    results.push(("4 perplexity calibration", perplexity_calibration()));
    results.push(("5 frobenius probe", frobenius_probe()));
    results.push(("6 entropy probe", entropy_probe()));
    results.push(("7 finite difference", finite_difference()));
    results.push(("8 efficiency trend", efficiency_trend()));
    results.push(("9 parameter accounting", parameter_accounting()));
    results.push(("10 determinism", determinism(root.path())));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
