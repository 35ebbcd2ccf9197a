//! Command-line workflows behind the `harp` binary.

pub mod commands;
pub mod manifest;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

use commands::{BenchArgs, DiagnoseArgs, EvalArgs, GenModelArgs, MetricsArgs, PruneArgs, SearchArgs};

#[derive(Parser)]
#[command(name = "harp", version, about = "Attention pruning with residual rescaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded random checkpoint.
    GenModel(GenModelArgs),
    /// Per-layer importance metrics (BI, similarity, Hessian, Sim).
    Metrics(MetricsArgs),
    /// Top-down greedy search for per-layer rescaling factors.
    SearchAlpha(SearchArgs),
    /// Perplexity of a checkpoint, optionally under a pruning schedule.
    Eval(EvalArgs),
    /// Dense vs pruned latency across sequence lengths.
    Bench(BenchArgs),
    /// Strip Q/K weights of the scheduled layers from a checkpoint.
    Prune(PruneArgs),
    /// Representation and attention diagnostics per layer.
    Diagnose(DiagnoseArgs),
}

fn init_threads() {
    if let Some(n) = std::env::var("HARP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    let result = match cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::SearchAlpha(a) => commands::search_alpha(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Prune(a) => commands::prune(a),
        Command::Diagnose(a) => commands::diagnose(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
