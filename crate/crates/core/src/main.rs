use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use edgert::artifact::{generate_reference_base, generate_reference_draft};
use edgert::bench::{parse_shapes, run_bench, BenchSpec};
use edgert::config::{load_engine_config, read_token_file, resolve_artifacts, EngineConfig, DEFAULT_SLOT_ID};
use edgert::dispatch::{auto_tune, write_overrides};
use edgert::kernels::KernelRegistry;
use edgert::rng::Lcg64;
use edgert::{Engine, Error, InferenceRequest, Result};

#[derive(Parser, Debug)]
#[command(name = "edgert", version, about = "Single-request edge inference runtime")]
struct Cli {
    /// Engine config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Execute one request and print tokens and stats as JSON.
    Run(RunArgs),
    /// Latency benchmark over a list of prefill/decode shapes.
    Bench(BenchArgs),
    /// Calibrate, auto-tune and write a dispatch override file.
    Tune(TuneArgs),
    /// Print the kernel registry.
    ListKernels,
    /// Write a deterministic reference artifact.
    GenArtifact(GenArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    request_id: Option<String>,
    /// Comma-separated token ids.
    #[arg(long, conflicts_with = "tokens_file")]
    tokens: Option<String>,
    /// Little-endian u32 token ids.
    #[arg(long)]
    tokens_file: Option<PathBuf>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    stop_token: Option<u32>,
    /// Dispatch override file, replacing the one in the config.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated P/D pairs, e.g. 128/16,256/32.
    #[arg(long)]
    shapes: String,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    plan: Switch,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    speculative: Switch,
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Length of the calibration prompt.
    #[arg(long, default_value_t = 16)]
    prompt_len: usize,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArtifactKind {
    Base,
    Draft,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum, default_value_t = ArtifactKind::Base)]
    kind: ArtifactKind,
    #[arg(long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run(a) => cmd_run(&need_config(&cli.config)?, a),
        Cmd::Bench(a) => cmd_bench(&need_config(&cli.config)?, cli.seed, a),
        Cmd::Tune(a) => cmd_tune(&need_config(&cli.config)?, cli.seed, a),
        Cmd::ListKernels => {
            println!("{}", pretty(&KernelRegistry::builtin().listing()));
            Ok(())
        }
        Cmd::GenArtifact(a) => {
            let art = match a.kind {
                ArtifactKind::Base => generate_reference_base(cli.seed),
                ArtifactKind::Draft => generate_reference_draft(cli.seed),
            };
            art.save(&a.output)?;
            println!("{}", a.output.display());
            Ok(())
        }
    }
}

fn need_config(path: &Option<PathBuf>) -> Result<EngineConfig> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::Validation("--config is required for this command".into()))?;
    load_engine_config(p)
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes")
}

fn parse_token_list(s: &str) -> Result<Vec<u32>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| Error::Parse(format!("bad token id {t:?} in --tokens")))
        })
        .collect()
}

fn with_table(mut cfg: EngineConfig, table: Option<PathBuf>) -> Result<EngineConfig> {
    if let Some(t) = table {
        cfg.dispatch_table_path = Some(std::path::absolute(&t).map_err(|e| Error::io(&t, e))?);
    }
    Ok(cfg)
}

fn cmd_run(cfg: &EngineConfig, a: RunArgs) -> Result<()> {
    let cfg = with_table(cfg.clone(), a.table)?;
    let tokens = match (&a.tokens, &a.tokens_file) {
        (Some(t), _) => parse_token_list(t)?,
        (None, Some(f)) => read_token_file(f)?,
        (None, None) => Vec::new(),
    };
    let id = match a.request_id {
        Some(id) => id,
        None => cfg
            .slots
            .first()
            .map_or_else(|| DEFAULT_SLOT_ID.to_owned(), |s| s.request_id.clone()),
    };
    let engine = Engine::new(cfg)?;
    let req = InferenceRequest {
        request_id: id,
        input_tokens: tokens,
        max_new_tokens: a.max_new_tokens,
        stop_token: a.stop_token,
    };
    let resp = engine.execute(&req)?;
    engine.shutdown();
    let out = json!({
        "request_id": req.request_id,
        "output_tokens": resp.output_tokens,
        "stats": resp.stats,
    });
    println!("{}", pretty(&out));
    Ok(())
}

fn cmd_bench(cfg: &EngineConfig, seed: u64, a: BenchArgs) -> Result<()> {
    let shapes = parse_shapes(&a.shapes)?;
    let mut cfg = with_table(cfg.clone(), a.table)?;
    // resolve the draft artifact only when it will be used
    cfg.speculative.enabled = a.speculative.on();
    let artifacts = resolve_artifacts(&cfg)?;
    let spec = BenchSpec {
        shapes,
        warmup_runs: a.warmup,
        timed_runs: a.runs,
        seed,
        plan: a.plan.on(),
        speculative: a.speculative.on(),
    };
    let report = run_bench(&cfg, &artifacts, &spec)?;
    let text = report.to_json_string();
    match &a.report {
        Some(p) => write_text(p, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_tune(cfg: &EngineConfig, seed: u64, a: TuneArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.capture_decode_plan = false;
    let engine = Engine::new(cfg)?;
    let vocab = engine.artifacts().prefill.arch.vocab_size as u32;
    let mut rng = Lcg64::new(seed);
    let prompt: Vec<u32> = (0..a.prompt_len).map(|_| rng.next_below(vocab)).collect();
    let id = engine.with_kv(|kv| kv.slots()[0].request_id().to_owned());
    let req = InferenceRequest::new(id, prompt).max_new(a.max_new_tokens);
    let contexts = engine.probe_contexts(&req)?;
    let outcome = auto_tune(engine.table(), &contexts, engine.registry(), a.warmup, a.reps)?;
    write_overrides(&a.output, &outcome.entries)?;
    let changed = outcome
        .sessions
        .iter()
        .filter(|s| {
            engine
                .table()
                .lookup(&s.context)
                .is_some_and(|e| e.entry.impl_id != s.candidates[s.chosen].impl_id)
        })
        .count();
    println!(
        "{}",
        pretty(&json!({
            "output": a.output,
            "contexts": outcome.entries.len(),
            "changed_from_default": changed,
        }))
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
