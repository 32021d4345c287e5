//! Shape-matrix latency benchmark.

use serde::{Deserialize, Serialize};

use crate::artifact::ResolvedArtifacts;
use crate::config::{EngineConfig, SlotConfig};
use crate::engine::{Engine, InferenceRequest, RequestStats};
use crate::error::{Error, Result};
use crate::kernels::KernelRegistry;
use crate::rng::Lcg64;

pub const BENCH_REQUEST_ID: &str = "bench";
pub const REPORT_VERSION: u32 = 1;
/// Allowed gap between total and prefill + decode, relative to total.
pub const DECOMPOSITION_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub prefill_len: usize,
    pub decode_len: usize,
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.prefill_len, self.decode_len)
    }
}

/// Parses `P/D[,P/D...]`.
pub fn parse_shapes(s: &str) -> Result<Vec<Shape>> {
    let bad = |part: &str| Error::Parse(format!("malformed shape {part:?}, expected P/D with P, D >= 1"));
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let (p, d) = part.split_once('/').ok_or_else(|| bad(part))?;
        let p: usize = p.trim().parse().map_err(|_| bad(part))?;
        let d: usize = d.trim().parse().map_err(|_| bad(part))?;
        if p == 0 || d == 0 {
            return Err(bad(part));
        }
        out.push(Shape {
            prefill_len: p,
            decode_len: d,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub shapes: Vec<Shape>,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub seed: u64,
    pub plan: bool,
    pub speculative: bool,
}

impl BenchSpec {
    pub fn new(shapes: Vec<Shape>) -> Self {
        Self {
            shapes,
            warmup_runs: 3,
            timed_runs: 10,
            seed: 0,
            plan: true,
            speculative: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Panics on an empty sample.
    pub fn of(xs: &[f64]) -> Self {
        assert!(!xs.is_empty(), "empty sample");
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub plan: bool,
    pub speculative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: String,
    pub prefill_len: usize,
    pub decode_len: usize,
    pub mode: Mode,
    pub timed_runs: usize,
    pub prefill_ms: Summary,
    pub decode_ms: Summary,
    pub total_ms: Summary,
    /// Over every decode step of every timed run.
    pub step_ms: Summary,
    pub tokens_per_run: Vec<usize>,
    pub output_tokens: Vec<u32>,
    pub decomposition_ok: bool,
    pub max_decomposition_gap: f64,
    /// Resolutions won by override entries, plan capture included.
    pub override_hits: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub hw_profile: String,
    pub edgert_version: String,
    pub debug_build: bool,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            hw_profile: crate::dispatch::HW_PROFILE_CPU_REF.into(),
            edgert_version: env!("CARGO_PKG_VERSION").into(),
            debug_build: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub report_version: u32,
    pub spec: BenchSpec,
    pub engine_config: serde_json::Value,
    pub environment: Environment,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Prompt for `shape`: uniform ids from a generator seeded by the bench
/// seed and the shape.
pub fn synth_prompt(seed: u64, shape: Shape, vocab: usize) -> Vec<u32> {
    let mixed = seed ^ ((shape.prefill_len as u64) << 32) ^ shape.decode_len as u64;
    let mut rng = Lcg64::new(mixed);
    (0..shape.prefill_len).map(|_| rng.next_below(vocab as u32)).collect()
}

/// Engine config for one shape: a single empty-prefix slot sized to
/// the shape, with the mode toggles applied.
pub fn shape_config(base: &EngineConfig, spec: &BenchSpec, shape: Shape) -> EngineConfig {
    let mut cfg = base.clone();
    cfg.slots = vec![SlotConfig::new(BENCH_REQUEST_ID, Vec::new(), shape.decode_len)];
    cfg.kv.max_slots = 1;
    cfg.kv.max_seq_len = shape.prefill_len + shape.decode_len;
    cfg.capture_decode_plan = spec.plan;
    cfg.speculative.enabled = spec.speculative;
    cfg
}

/// Runs every shape sequentially: warmups, then timed runs that must
/// each emit exactly `decode_len` tokens.
pub fn run_bench(base: &EngineConfig, artifacts: &ResolvedArtifacts, spec: &BenchSpec) -> Result<BenchReport> {
    if spec.timed_runs == 0 {
        return Err(Error::Validation("timed_runs must be at least 1".into()));
    }
    if spec.speculative && artifacts.draft.is_none() {
        return Err(Error::Validation("speculative bench needs a draft artifact".into()));
    }
    let mut rows = Vec::with_capacity(spec.shapes.len());
    for &shape in &spec.shapes {
        let cfg = shape_config(base, spec, shape);
        let engine = Engine::from_parts(cfg, artifacts.clone(), KernelRegistry::builtin())?;
        let prompt = synth_prompt(spec.seed, shape, artifacts.prefill.arch.vocab_size);
        let req = InferenceRequest::new(BENCH_REQUEST_ID, prompt).max_new(shape.decode_len);
        let mut output: Option<Vec<u32>> = None;
        let mut timed: Vec<RequestStats> = Vec::with_capacity(spec.timed_runs);
        let mut tokens_per_run = Vec::with_capacity(spec.timed_runs);
        for i in 0..spec.warmup_runs + spec.timed_runs {
            let resp = engine.execute(&req)?;
            if resp.output_tokens.len() != shape.decode_len {
                return Err(Error::Validation(format!(
                    "shape {shape}: run produced {} tokens, expected {}",
                    resp.output_tokens.len(),
                    shape.decode_len
                )));
            }
            match &output {
                Some(prev) if *prev != resp.output_tokens => {
                    return Err(Error::Validation(format!(
                        "shape {shape}: token output changed between runs"
                    )));
                }
                Some(_) => {}
                None => output = Some(resp.output_tokens.clone()),
            }
            if i >= spec.warmup_runs {
                tokens_per_run.push(resp.output_tokens.len());
                timed.push(resp.stats);
            }
        }
        let override_hits = engine.table().override_hits();
        engine.shutdown();
        let col = |f: fn(&RequestStats) -> f64| Summary::of(&timed.iter().map(f).collect::<Vec<_>>());
        let steps: Vec<f64> = timed.iter().flat_map(|s| s.per_step_ms.iter().copied()).collect();
        let max_gap = timed
            .iter()
            .map(|s| (s.total_ms - (s.prefill_ms + s.decode_ms)).abs() / s.total_ms.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        let accept = timed
            .iter()
            .filter_map(|s| s.speculative.as_ref())
            .map(|s| s.accept_ratio)
            .next_back();
        rows.push(BenchRow {
            shape: shape.to_string(),
            prefill_len: shape.prefill_len,
            decode_len: shape.decode_len,
            mode: Mode {
                plan: spec.plan,
                speculative: spec.speculative,
            },
            timed_runs: spec.timed_runs,
            prefill_ms: col(|s| s.prefill_ms),
            decode_ms: col(|s| s.decode_ms),
            total_ms: col(|s| s.total_ms),
            step_ms: Summary::of(&steps),
            tokens_per_run,
            output_tokens: output.unwrap_or_default(),
            decomposition_ok: timed.iter().all(|s| s.decomposition_holds(DECOMPOSITION_TOL)),
            max_decomposition_gap: max_gap,
            override_hits,
            accept_ratio: accept,
        });
    }
    Ok(BenchReport {
        report_version: REPORT_VERSION,
        spec: spec.clone(),
        engine_config: serde_json::to_value(base).expect("config serializes"),
        environment: Environment::current(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        let s = parse_shapes("512/32, 1024/64").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].to_string(), "1024/64");
        for bad in ["", "512", "512/", "a/3", "0/4", "4/0", "1/2/3", "-1/2"] {
            assert!(parse_shapes(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn summary_of_one_sample() {
        let s = Summary::of(&[2.5]);
        assert_eq!((s.mean, s.median, s.min, s.max), (2.5, 2.5, 2.5, 2.5));
        assert_eq!(Summary::of(&[1.0, 4.0, 2.0, 3.0]).median, 2.5);
    }
}
