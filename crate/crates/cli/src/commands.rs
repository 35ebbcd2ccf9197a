use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use harp_core::benchmark::{emit_report, run_bench, BenchConfig};
use harp_core::checkpoint::{self, Checkpoint};
use harp_core::evaluation::{diagnose as run_diagnose, Evaluator};
use harp_core::pruning::{
    layer_importance_report, search_alpha as run_search, MetricsConfig, SearchConfig,
};
use harp_core::{AlphaSchedule, Corpus, LayerPlan, ModelConfig, PruneSpec};

use crate::manifest::RunManifest;

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::from_file(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_schedule(path: &Path) -> Result<AlphaSchedule> {
    let text = fs::read_to_string(path).with_context(|| format!("reading schedule {}", path.display()))?;
    Ok(AlphaSchedule::from_json(&text).with_context(|| format!("parsing schedule {}", path.display()))?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn resolve_config(spec: &str) -> Result<ModelConfig> {
    if let Some(cfg) = ModelConfig::preset(spec) {
        return Ok(cfg);
    }
    let text = fs::read_to_string(spec)
        .with_context(|| format!("{spec:?} is neither a preset (tiny, desk, llama31-8b-shape) nor a readable file"))?;
    let cfg: ModelConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {spec}"))?;
    Ok(cfg)
}

#[derive(Args, Serialize)]
pub struct GenModelArgs {
    /// Preset name (tiny, desk) or path to a JSON model config.
    #[arg(long, default_value = "desk")]
    pub config: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_model(args: GenModelArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let ck = checkpoint::generate_model(&cfg, args.seed)?;
    prepare_out(&args.out)?;
    let path = args.out.join("model.harp");
    checkpoint::save(&ck, &path)?;
    let digest = ck.digest();
    println!("parameters: {}", ck.param_count());
    println!("sha256: {digest}");
    println!("wrote {}", path.display());
    let mut m = RunManifest::new("gen-model", &args)?;
    m.input("generated_checkpoint", digest);
    m.output(&path);
    m.write(&args.out)?;
    Ok(())
}

#[derive(Args, Serialize)]
pub struct MetricsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    #[arg(long, default_value_t = 128)]
    pub stride: usize,
    /// Use at most this many corpus tokens.
    #[arg(long, default_value_t = 2048)]
    pub max_tokens: usize,
    /// Relative step of the finite-difference Hessian metric.
    #[arg(long, default_value_t = 1e-2)]
    pub epsilon: f64,
}

pub fn metrics(args: MetricsArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.corpus)?;
    let cfg = MetricsConfig {
        window_size: args.window,
        stride: args.stride,
        max_tokens: Some(args.max_tokens),
        epsilon: args.epsilon,
    };
    let report = layer_importance_report(&ck, &corpus, &cfg)?;
    prepare_out(&args.out)?;
    let jsonl = args.out.join("metrics.jsonl");
    let mut f = fs::File::create(&jsonl)?;
    for r in &report.records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    let table = report.rank_table();
    let ranks = args.out.join("ranks.tsv");
    let mut t = String::from("layer");
    for name in table.keys() {
        t.push('\t');
        t.push_str(name);
    }
    t.push('\n');
    for layer in 0..report.records.len() {
        t.push_str(&layer.to_string());
        for ranks in table.values() {
            t.push('\t');
            t.push_str(&ranks[layer].to_string());
        }
        t.push('\n');
    }
    fs::write(&ranks, &t)?;
    print!("{t}");
    let mut m = RunManifest::new("metrics", &args)?;
    m.input("checkpoint", ck.digest());
    m.input("corpus", corpus.digest());
    m.output(&jsonl);
    m.output(&ranks);
    m.write(&args.out)?;
    Ok(())
}

#[derive(Args, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of top layers to prune.
    #[arg(long)]
    pub layers: usize,
    /// Comma-separated candidate values.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub grid: Vec<f32>,
    #[arg(long, default_value_t = 256)]
    pub window: usize,
    #[arg(long, default_value_t = 256)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn search_alpha(args: SearchArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.corpus)?;
    let spec = PruneSpec::top(ck.config.num_layers, args.layers)?;
    let cfg = SearchConfig { grid: args.grid.clone(), window_size: args.window, stride: args.stride };
    let evaluator = Evaluator::new(&corpus, args.window, args.stride, ck.config.max_seq_len)?;
    let before = evaluator.perplexity(&ck, &LayerPlan::new(&ck.config, &spec, &vec![1.0; spec.len()])?)?;
    let outcome = run_search(&ck, &spec, &corpus, &cfg)?;
    let after = outcome.best_ppl.unwrap_or(before.ppl);

    prepare_out(&args.out)?;
    let schedule_path = args.out.join("schedule.json");
    fs::write(&schedule_path, outcome.schedule.to_json()? + "\n")?;
    let trace_path = args.out.join("trace.csv");
    let mut w = csv::Writer::from_path(&trace_path)?;
    w.write_record(["layer", "alpha", "ppl"])?;
    for row in &outcome.trace {
        w.write_record([row.layer.to_string(), row.alpha.to_string(), row.ppl.map(|p| p.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    println!("alphas (top-down): {:?}", outcome.schedule.alphas);
    println!("ppl before (alpha=1): {}", before.ppl);
    println!("ppl after: {after}");
    let mut m = RunManifest::new("search-alpha", &args)?;
    m.input("checkpoint", ck.digest());
    m.input("corpus", corpus.digest());
    m.output(&schedule_path);
    m.output(&trace_path);
    m.write(&args.out)?;
    Ok(())
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pruning schedule JSON; dense evaluation when absent.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub window: usize,
    #[arg(long, default_value_t = 256)]
    pub stride: usize,
    /// Feed W_V the raw hidden state on pruned layers instead of the normalized one.
    #[arg(long)]
    pub no_pruned_prenorm: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn plan_for(ck: &Checkpoint, schedule: Option<&AlphaSchedule>) -> Result<LayerPlan> {
    Ok(match schedule {
        Some(s) => LayerPlan::from_schedule(&ck.config, s)?,
        None => LayerPlan::dense(ck.config.num_layers),
    })
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.corpus)?;
    let schedule = args.schedule.as_deref().map(load_schedule).transpose()?;
    let plan = plan_for(&ck, schedule.as_ref())?.with_pruned_prenorm(!args.no_pruned_prenorm);
    let result = Evaluator::new(&corpus, args.window, args.stride, ck.config.max_seq_len)?.perplexity(&ck, &plan)?;
    prepare_out(&args.out)?;
    let path = args.out.join("eval.json");
    write_json(&path, &result)?;
    println!("ppl: {}", result.ppl);
    println!("tokens: {}", result.token_count);
    let mut m = RunManifest::new("eval", &args)?;
    m.input("checkpoint", ck.digest());
    m.input("corpus", corpus.digest());
    m.output(&path);
    m.write(&args.out)?;
    Ok(())
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Pruning schedule JSON. Without it, the top `--layers` layers are pruned at alpha 1.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub layers: usize,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    pub lens: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let (spec, alphas) = match &args.schedule {
        Some(p) => {
            let s = load_schedule(p)?;
            (s.prune_spec(ck.config.num_layers)?, s.alphas)
        }
        None => {
            let spec = PruneSpec::top(ck.config.num_layers, args.layers)?;
            let n = spec.len();
            (spec, vec![1.0; n])
        }
    };
    let label = args.ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let cfg = BenchConfig {
        label,
        seq_lengths: args.lens.clone(),
        repeats: args.repeats,
        warmup: args.warmup,
        seed: args.seed,
    };
    let result = run_bench(&ck, &spec, &alphas, &cfg)?;
    for p in &result.points {
        match &p.timing {
            Ok(t) => println!(
                "N={:>6} {:>6}: {:.6}s ± {:.6}s (speedup {})",
                p.seq_len,
                p.variant,
                t.mean_s,
                t.ci95_s,
                p.speedup.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into())
            ),
            Err(e) => println!("N={:>6} {:>6}: failed: {e}", p.seq_len, p.variant),
        }
    }
    prepare_out(&args.out)?;
    let files = emit_report(std::slice::from_ref(&result), &args.out)?;
    let json = args.out.join("bench.json");
    write_json(&json, &result)?;
    let mut m = RunManifest::new("bench", &args)?;
    m.input("checkpoint", ck.digest());
    m.output(&files.csv);
    m.output(&files.svg);
    m.output(&json);
    m.write(&args.out)?;
    Ok(())
}

#[derive(Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub schedule: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn prune(args: PruneArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let schedule = load_schedule(&args.schedule)?;
    let spec = schedule.prune_spec(ck.config.num_layers)?;
    let (stripped, report) = checkpoint::strip(&ck, &spec)?;
    prepare_out(&args.out)?;
    let path = args.out.join("model.harp");
    checkpoint::save(&stripped, &path)?;
    let report_path = args.out.join("strip_report.json");
    write_json(&report_path, &report)?;
    println!(
        "removed {} of {} parameters ({:.3}%)",
        report.removed_params,
        report.total_params,
        100.0 * report.ratio()
    );
    let mut m = RunManifest::new("prune", &args)?;
    m.input("checkpoint", ck.digest());
    m.output(&path);
    m.output(&report_path);
    m.write(&args.out)?;
    Ok(())
}

#[derive(Args, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Number of leading corpus tokens to probe.
    #[arg(long, default_value_t = 128)]
    pub tokens: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.corpus)?;
    let schedule = args.schedule.as_deref().map(load_schedule).transpose()?;
    let plan = plan_for(&ck, schedule.as_ref())?;
    if args.tokens == 0 {
        bail!("--tokens must be positive");
    }
    let n = args.tokens.min(corpus.len()).min(ck.config.max_seq_len);
    let records = run_diagnose(&ck, &plan, &corpus.tokens()[..n])?;
    prepare_out(&args.out)?;
    let path = args.out.join("diagnostics.jsonl");
    let mut f = fs::File::create(&path)?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    let mut m = RunManifest::new("diagnose", &args)?;
    m.input("checkpoint", ck.digest());
    m.input("corpus", corpus.digest());
    m.output(&path);
    m.write(&args.out)?;
    Ok(())
}
