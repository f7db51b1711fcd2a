use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hybrid_stream::bench::{
    cache_norm_trace, run_frame_bench, run_token_bench, write_bench_csv, write_frame_csv, write_norm_csv, BenchMode,
    BenchPlan, PlateauStats, DEFAULT_TOKENS_PER_FRAME, DEFAULT_WARMUP,
};
use hybrid_stream::model::{shape_report, ModelConfig};
use hybrid_stream::verify::{verify, Suite, VerifyOptions};
use hybrid_stream::Result;

#[derive(Parser)]
#[command(name = "hybrid-bench", version, about = "Streaming benchmarks and self-checks for the hybrid engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Latency and throughput benchmarks.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Memory telemetry.
    Trace {
        #[command(subcommand)]
        kind: TraceKind,
    },
    /// Run oracle suites; exits nonzero if any check fails.
    Verify(VerifyArgs),
    /// Print layer pattern and state shapes without allocating weights.
    Shapes(ShapesArgs),
}

#[derive(Subcommand)]
enum BenchKind {
    /// Per-token latency curve.
    Tokens(Common),
    /// Frame throughput with the cache carried across frames.
    Frames(Common),
}

#[derive(Subcommand)]
enum TraceKind {
    /// Frobenius norm of every GDN memory after each step.
    Norms(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Micro,
    PaperShape,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Micro => "micro",
            Preset::PaperShape => "paper-shape",
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON model config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "micro")]
    preset: Preset,
}

impl ConfigArgs {
    fn load(&self) -> Result<(String, ModelConfig)> {
        match &self.config {
            Some(p) => Ok((p.display().to_string(), ModelConfig::load(p)?)),
            None => Ok((self.preset.name().to_string(), ModelConfig::preset(self.preset.name())?)),
        }
    }
}

#[derive(Args)]
struct Common {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Recorded steps (tokens, norms).
    #[arg(long, default_value_t = 4096)]
    steps: usize,
    /// Recorded frames (frames).
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = DEFAULT_TOKENS_PER_FRAME)]
    tokens_per_frame: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    /// Replace every mixer with full causal attention.
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Staggered sessions per frame benchmark.
    #[arg(long, default_value_t = 1)]
    lanes: usize,
    /// Time the first and last token deciles back to back instead of in
    /// alternation on two sessions.
    #[arg(long)]
    sequential_deciles: bool,
}

impl Common {
    fn plan(&self, mode: BenchMode) -> Result<BenchPlan> {
        let (name, config) = self.cfg.load()?;
        Ok(BenchPlan {
            total_steps: match mode {
                BenchMode::TokenStream => self.steps,
                BenchMode::FrameStream => self.frames,
            },
            tokens_per_frame: self.tokens_per_frame,
            warmup_steps: self.warmup,
            repeats: self.repeats,
            seed: self.seed,
            lanes: self.lanes,
            paired_deciles: !self.sequential_deciles,
            ..BenchPlan::new(name, config, mode).baseline(self.baseline)
        })
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = ["equivalence", "gradients", "invariants", "all"])]
    suite: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add this much to the chunked output before comparing (detector test).
    #[arg(long)]
    inject_perturbation: Option<f64>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShapesArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Sequence length used for the logits shape.
    #[arg(long, default_value_t = 1)]
    seq_len: usize,
}

fn csv_sink(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    Ok(match path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    config: &'a str,
    baseline: bool,
    #[serde(flatten)]
    summary: T,
}

#[derive(Serialize)]
struct NormSummary {
    steps: usize,
    bound_violations: usize,
    max_bound_ratio: f64,
    plateau_holds: bool,
    second_half: Vec<PlateauStats>,
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Bench { kind: BenchKind::Tokens(c) } => {
            let plan = c.plan(BenchMode::TokenStream)?;
            let b = run_token_bench(&plan)?;
            if let Some(w) = csv_sink(&c.out)? {
                write_bench_csv(w, &b.records)?;
            }
            print_json(&Summary { config: &plan.config_name, baseline: c.baseline, summary: &b.summary })?;
        }
        Command::Bench { kind: BenchKind::Frames(c) } => {
            let plan = c.plan(BenchMode::FrameStream)?;
            let b = run_frame_bench(&plan)?;
            if let Some(w) = csv_sink(&c.out)? {
                write_frame_csv(w, &b.records)?;
            }
            print_json(&Summary { config: &plan.config_name, baseline: c.baseline, summary: &b.summary })?;
        }
        Command::Trace { kind: TraceKind::Norms(c) } => {
            let plan = c.plan(BenchMode::TokenStream)?;
            let t = cache_norm_trace(&plan)?;
            if let Some(w) = csv_sink(&c.out)? {
                write_norm_csv(w, &t)?;
            }
            let s = NormSummary {
                steps: plan.total_steps,
                bound_violations: t.bound_violations.len(),
                max_bound_ratio: t.max_bound_ratio,
                plateau_holds: t.plateau_holds(0.2),
                second_half: t.second_half.clone(),
            };
            print_json(&Summary { config: &plan.config_name, baseline: false, summary: s })?;
        }
        Command::Verify(v) => {
            let (_, config) = v.cfg.load()?;
            let opts = VerifyOptions {
                seed: v.seed,
                perturb_chunked: v.inject_perturbation,
                config,
            };
            let report = verify(Suite::parse(&v.suite)?, &opts)?;
            if let Some(p) = &v.out {
                serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &report)?;
            }
            print_json(&report)?;
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Shapes(s) => {
            let (_, config) = s.cfg.load()?;
            print_json(&shape_report(&config, s.seq_len)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
