//! Checks shared by the dedicated test files and the acceptance target.
//! Each returns whether it held plus a one-line detail.

use std::sync::Arc;
use std::time::{Duration, Instant};

use edgert::alloc::AllocCounter;
use edgert::artifact::{generate_reference_base, ModelArtifact};
use edgert::bench::{run_bench, BenchSpec, Shape};
use edgert::config::SlotConfig;
use edgert::dispatch::{
    auto_tune, concrete_key, shape_sig_of, write_overrides, DispatchEntry, DispatchKey, DispatchTable, EntryOrigin,
    OpKind, Stage,
};
use edgert::kernels::{ExecEnv, KernelImpl, KernelRegistry, OpArgs, ParamMap, StepPlan};
use edgert::kv::{Compression, Compressor, KvBlock, KvGeometry, KvStore};
use edgert::model::ops::{
    gelu_erf_scalar, gelu_tanh_scalar, masked_softmax_row, rope_head_decomposed, rope_head_fused, rope_table_into,
    V_SAFE,
};
use edgert::model::{argmax, ModelRunner, Pass};
use edgert::rng::Lcg64;
use edgert::InferenceRequest;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

use super::*;

#[derive(Debug, Clone)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn ok(detail: impl Into<String>) -> Self {
        Self {
            pass: true,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self {
            pass: false,
            detail: detail.into(),
        }
    }

    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn kv_for(a: &ModelArtifact, capacity: usize, alloc: &AllocCounter) -> KvStore {
    let (n_layers, n_kv_heads, head_dim) = a.arch.kv_shape();
    KvStore::new(
        KvGeometry {
            n_layers,
            n_kv_heads,
            head_dim,
            capacity,
        },
        alloc,
    )
}

fn default_table(a: &ModelArtifact) -> DispatchTable {
    DispatchTable::with_defaults(Arc::new(KernelRegistry::builtin()), &[&a.arch]).unwrap()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------------------
// speculative decoding

pub fn speculative_lossless(seeds: u64, blocks: &[usize], max_new: usize) -> Check {
    let t = Instant::now();
    let mut cases = 0;
    let mut accepted = 0u64;
    let mut proposed = 0u64;
    for seed in 0..seeds {
        let mut rng = Lcg64::new(1000 + seed);
        let prompt_len = 1 + rng.next_below(24) as usize;
        let req = InferenceRequest::new("r", tokens(&mut rng, prompt_len, 256)).max_new(max_new);
        let mut plain_cfg = config(96, vec![SlotConfig::new("r", vec![], max_new)]);
        plain_cfg.capture_decode_plan = false;
        let want = engine(plain_cfg, artifacts(base(seed), None))
            .execute(&req)
            .unwrap()
            .output_tokens;
        for &m in blocks {
            let mut cfg = config(96, vec![SlotConfig::new("r", vec![], max_new)]);
            cfg.speculative.enabled = true;
            cfg.speculative.block_len = m;
            cfg.capture_decode_plan = seed % 4 < 2;
            let b = base(seed);
            let d = if seed % 2 == 0 {
                draft(seed ^ 0x5eed)
            } else {
                aligned_draft(&b, seed ^ 0x5eed)
            };
            let e = engine(cfg, artifacts(b, Some(d)));
            let got = e.execute(&req).unwrap();
            if got.output_tokens != want {
                return Check::fail(format!(
                    "seed {seed} m {m}: speculative {:?} != greedy {:?}",
                    got.output_tokens, want
                ));
            }
            let s = got.stats.speculative.unwrap();
            accepted += s.accepted;
            proposed += s.proposed;
            cases += 1;
        }
    }
    let el = secs(t);
    let detail = format!(
        "{cases} cases identical to greedy, overall accept ratio {:.3}, {el:.1}s",
        accepted as f64 / proposed.max(1) as f64
    );
    if el < 60.0 {
        Check::ok(detail)
    } else {
        Check::fail(format!("{detail} (limit 60s)"))
    }
}

// ---------------------------------------------------------------------------
// prefix reuse

pub fn prefix_reuse(pairs: u64) -> Check {
    let t = Instant::now();
    for seed in 0..pairs {
        let mut rng = Lcg64::new(7000 + seed);
        let k = 1 + rng.next_below(32) as usize;
        let u = 1 + rng.next_below(32) as usize;
        let prefix = tokens(&mut rng, k, 256);
        let suffix = tokens(&mut rng, u, 256);
        let art = base(seed);
        let e = engine(
            config(80, vec![SlotConfig::new("p", prefix.clone(), 8)]),
            artifacts(art.clone(), None),
        );
        e.prefill("p", &suffix).unwrap();

        let alloc = AllocCounter::new();
        let mut fresh = kv_for(&art, 80, &alloc);
        let mut full = prefix.clone();
        full.extend_from_slice(&suffix);
        let mut runner = ModelRunner::new(art.clone(), full.len(), 80, &alloc);
        runner.prefill(&full, &mut fresh, &default_table(&art)).unwrap();

        let same = e.with_kv(|kv| {
            let slot = kv.slot("p").unwrap();
            let warm = slot.base();
            warm.len() == full.len()
                && (0..art.arch.n_layers).all(|l| {
                    bits(warm.k_range(l, 0, full.len())) == bits(fresh.k_range(l, 0, full.len()))
                        && bits(warm.v_range(l, 0, full.len())) == bits(fresh.v_range(l, 0, full.len()))
                })
        });
        e.release("p").unwrap();
        if !same {
            return Check::fail(format!(
                "pair {seed} (K={k}, |u|={u}): KV differs from a fresh full prefill"
            ));
        }
    }
    let el = secs(t);
    let detail = format!("{pairs} (prefix, suffix) pairs bitwise equal, {el:.2}s");
    if el < 30.0 {
        Check::ok(detail)
    } else {
        Check::fail(format!("{detail} (limit 30s)"))
    }
}

// ---------------------------------------------------------------------------
// capture / replay

pub fn capture_replay(seeds: u64) -> Check {
    let mut max_replay_resolutions = 0;
    let mut min_eager_resolutions = u64::MAX;
    for seed in 0..seeds {
        let mut rng = Lcg64::new(3000 + seed);
        let n = 1 + rng.next_below(20) as usize;
        let prompt = tokens(&mut rng, n, 256);
        let mut outs = Vec::new();
        for plan in [true, false] {
            let mut cfg = config(64, vec![SlotConfig::new("c", vec![], 24)]);
            cfg.capture_decode_plan = plan;
            let e = engine(cfg, artifacts(base(seed), None));
            if e.has_plan() != plan {
                return Check::fail(format!(
                    "seed {seed}: plan presence {} != configured {plan}",
                    e.has_plan()
                ));
            }
            e.prefill("c", &prompt).unwrap();
            let before = e.table().resolution_count();
            let out = e.generate("c", &[], Some(24)).unwrap().output_tokens;
            let delta = e.table().resolution_count() - before;
            if plan {
                max_replay_resolutions = max_replay_resolutions.max(delta);
            } else {
                min_eager_resolutions = min_eager_resolutions.min(delta);
            }
            outs.push(out);
        }
        if outs[0] != outs[1] {
            return Check::fail(format!("seed {seed}: replay {:?} != eager {:?}", outs[0], outs[1]));
        }
    }
    let detail = format!(
        "{seeds} seeds identical; resolutions during replay decode = {max_replay_resolutions} (eager: >= {min_eager_resolutions})"
    );
    if max_replay_resolutions == 0 && min_eager_resolutions > 0 {
        Check::ok(detail)
    } else {
        Check::fail(detail)
    }
}

/// A captured plan stepped next to the eager path from identical state.
pub fn replay_matches_eager_bitwise(seed: u64, steps: usize) -> Check {
    let art = base(seed);
    let table = default_table(&art);
    let alloc = AllocCounter::new();
    let mut rng = Lcg64::new(seed);
    let prompt = tokens(&mut rng, 9, 256);
    let cap = prompt.len() + steps + 2;
    let mut kv_a = kv_for(&art, cap, &alloc);
    let mut runner = ModelRunner::new(art.clone(), prompt.len(), cap, &alloc);
    runner.prefill(&prompt, &mut kv_a, &table).unwrap();
    let mut tok = argmax(runner.logits(0));
    let mut kv_b = kv_for(&art, cap, &alloc);
    runner.prefill(&prompt, &mut kv_b, &table).unwrap();
    // capture on a third store so the two compared ones start equal
    let mut scratch = kv_for(&art, cap, &alloc);
    runner.prefill(&prompt, &mut scratch, &table).unwrap();
    let mut plan = StepPlan::capture(art.clone(), tok, &mut scratch, &table, None, &alloc).unwrap();
    let mut eager = ModelRunner::new(art.clone(), 1, cap, &alloc);
    for i in 0..steps {
        let pos = kv_a.len();
        let replayed = bits(plan.replay(tok, pos, &mut kv_a).unwrap());
        eager.run(&mut kv_b, &table, Pass::decode(&[tok])).unwrap();
        if replayed != bits(eager.logits(0)) {
            return Check::fail(format!("seed {seed} step {i}: replay logits differ from eager"));
        }
        tok = argmax(eager.logits(0));
    }
    Check::ok(format!("{steps} replayed steps bitwise equal to eager"))
}

// ---------------------------------------------------------------------------
// prefill / decode consistency

pub fn prefill_decode_consistency(seeds: u64, max_len: usize) -> Check {
    let mut positions = 0;
    for seed in 0..seeds {
        let art = base(seed);
        let table = default_table(&art);
        let alloc = AllocCounter::new();
        let mut rng = Lcg64::new(5000 + seed);
        let n = 1 + rng.next_below(max_len as u32) as usize;
        let toks = tokens(&mut rng, n, 256);

        let mut kv_p = kv_for(&art, n, &alloc);
        let mut runner = ModelRunner::new(art.clone(), n, n, &alloc);
        let batch = runner.prefill_all(&toks, &mut kv_p, &table).unwrap();

        let mut kv_d = kv_for(&art, n, &alloc);
        let mut step = ModelRunner::new(art.clone(), 1, n, &alloc);
        for (i, &t) in toks.iter().enumerate() {
            step.run(&mut kv_d, &table, Pass::decode(&[t])).unwrap();
            if bits(step.logits(0)) != bits(&batch[i]) {
                return Check::fail(format!("seed {seed}: position {i} of {n} differs"));
            }
            positions += 1;
        }
        if kv_p.snapshot() != kv_d.snapshot() {
            return Check::fail(format!("seed {seed}: caches differ"));
        }
    }
    Check::ok(format!("{seeds} prompts, {positions} positions bitwise equal"))
}

// ---------------------------------------------------------------------------
// dispatch

const MODELS: [&str; 3] = ["ref_decoder", "ref_draft", "other"];
const ROLES: [&str; 4] = ["q_proj", "attention", "mlp_act", "lm_head"];
const NAMES: [&str; 4] = ["layers.0.q_proj", "layers.1.attention", "layers.3.mlp_act", "lm_head"];

fn arb_context() -> impl Strategy<Value = DispatchKey> {
    (
        0..OpKind::ALL.len(),
        0..MODELS.len(),
        0..ROLES.len(),
        0..NAMES.len(),
        any::<bool>(),
        prop::collection::vec(prop::sample::select(vec![1usize, 4, 16, 64, 128]), 4),
    )
        .prop_map(|(k, m, r, n, decode, dims)| {
            let kind = OpKind::ALL[k];
            let sig = shape_sig_of(kind, &dims[..kind.sig_keys().len()]);
            let stage = if decode { Stage::Decode } else { Stage::Prefill };
            concrete_key(MODELS[m], kind, ROLES[r], NAMES[n], stage, sig)
        })
}

/// A random entry derived from `ctx`: each field kept or wildcarded, and
/// some impl of the right kind.
fn arb_entry() -> impl Strategy<Value = DispatchEntry> {
    (
        arb_context(),
        prop::collection::vec(any::<bool>(), 7),
        any::<prop::sample::Index>(),
    )
        .prop_map(|(ctx, keep, pick)| {
            let mut k = ctx.clone();
            let fields: [&mut String; 7] = [
                &mut k.model_name,
                &mut k.hw_profile,
                &mut k.op_kind,
                &mut k.layer_role,
                &mut k.op_name,
                &mut k.stage,
                &mut k.shape_sig,
            ];
            for (f, keep) in fields.into_iter().zip(keep) {
                if !keep {
                    f.clear();
                }
            }
            let reg = KernelRegistry::builtin();
            let kind = OpKind::parse(&ctx.op_kind).unwrap();
            let ids: Vec<String> = reg.by_kind(kind).map(|i| i.impl_id.clone()).collect();
            DispatchEntry::new(k, ids[pick.index(ids.len())].clone())
        })
}

fn eligible(table: &DispatchTable, e: &DispatchEntry, ctx: &DispatchKey) -> bool {
    let reg = table.registry();
    let imp = reg.get(&e.impl_id).unwrap();
    e.key.matches(ctx) && imp.op_kind.as_str() == ctx.op_kind && imp.supports(Stage::parse(&ctx.stage).unwrap())
}

pub fn dispatch_properties(cases: u32) -> Check {
    let reg = Arc::new(KernelRegistry::builtin());
    let archs = [
        edgert::artifact::ArchMeta::reference_base(),
        edgert::artifact::ArchMeta::reference_draft(),
    ];
    let archs: Vec<_> = archs.iter().collect();
    let mut runner = TestRunner::new(PtConfig {
        cases,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let strat = (arb_context(), prop::collection::vec(arb_entry(), 0..12), arb_entry());
    let result = runner.run(&strat, |(ctx, extra, probe)| {
        let mut t = DispatchTable::with_defaults(reg.clone(), &archs).unwrap();
        // totality over the defaults alone
        let r = t
            .resolve(&ctx)
            .map_err(|e| TestCaseError::fail(format!("no resolution for {ctx}: {e}")))?;
        let imp = reg.get(&r.entry.impl_id).unwrap();
        prop_assert_eq!(imp.op_kind.as_str(), ctx.op_kind.as_str());
        prop_assert!(imp.supports(Stage::parse(&ctx.stage).unwrap()));

        for e in extra {
            t.add_entry(e, EntryOrigin::Override).unwrap();
        }
        // specificity dominance against a brute-force scan
        let best = t.lookup(&ctx).expect("defaults keep the table total");
        let max_spec = t
            .entries()
            .iter()
            .filter(|te| eligible(&t, &te.entry, &ctx))
            .map(|te| te.entry.key.specificity())
            .max()
            .unwrap();
        prop_assert_eq!(best.entry.key.specificity(), max_spec);
        prop_assert!(eligible(&t, &best.entry, &ctx));
        let before = (best.entry.key.clone(), best.entry.impl_id.clone());

        // monotonicity: one more entry
        let probe_matches = eligible(&t, &probe, &ctx);
        let probe_spec = probe.key.specificity();
        t.add_entry(probe, EntryOrigin::Override).unwrap();
        let after = t.lookup(&ctx).unwrap();
        if probe_matches {
            prop_assert!(after.entry.key.specificity() >= before.0.specificity());
            if probe_spec > before.0.specificity() {
                prop_assert_eq!(after.entry.key.specificity(), probe_spec);
            }
        } else {
            prop_assert_eq!(&(after.entry.key.clone(), after.entry.impl_id.clone()), &before);
        }
        Ok(())
    });
    match result {
        Ok(()) => Check::ok(format!(
            "{cases} random cases: totality, specificity dominance, monotonicity"
        )),
        Err(e) => Check::fail(format!("{e}")),
    }
}

fn rigged_linear(args: &OpArgs, params: &ParamMap, env: &mut ExecEnv<'_>) -> Result<(), edgert::kernels::KernelFault> {
    edgert::kernels::builtin::linear_naive(args, params, env)
}

fn rigged_slow(args: &OpArgs, params: &ParamMap, env: &mut ExecEnv<'_>) -> Result<(), edgert::kernels::KernelFault> {
    std::thread::sleep(Duration::from_micros(400));
    rigged_linear(args, params, env)
}

fn rigged_fast(args: &OpArgs, params: &ParamMap, env: &mut ExecEnv<'_>) -> Result<(), edgert::kernels::KernelFault> {
    std::thread::sleep(Duration::from_micros(40));
    rigged_linear(args, params, env)
}

/// Two same-function linear kernels, one sleeping 10x longer; the table
/// defaults to the slow one.
pub fn rigged_tuner(reps: usize, dir: &std::path::Path) -> Check {
    let mut reg = KernelRegistry::new();
    reg.register(KernelImpl::new("linear.slow", OpKind::Linear, rigged_slow))
        .unwrap();
    reg.register(KernelImpl::new("linear.fast", OpKind::Linear, rigged_fast))
        .unwrap();
    let reg = Arc::new(reg);
    let mut table = DispatchTable::new(reg.clone());
    table
        .add_entry(
            DispatchEntry::new(DispatchKey::for_kind(OpKind::Linear), "linear.slow"),
            EntryOrigin::Builtin,
        )
        .unwrap();
    let ctx = concrete_key(
        "ref_decoder",
        OpKind::Linear,
        "q_proj",
        "layers.0.q_proj",
        Stage::Decode,
        shape_sig_of(OpKind::Linear, &[1, 64, 64]),
    );
    let mut wins = 0;
    let mut last = None;
    for _ in 0..reps {
        let out = auto_tune(&table, std::slice::from_ref(&ctx), &reg, 1, 3).unwrap();
        if out.entries[0].impl_id == "linear.fast" {
            wins += 1;
        }
        last = Some(out);
    }
    let out = last.unwrap();
    let path = dir.join("tuned.json");
    write_overrides(&path, &out.entries).unwrap();
    let mut fresh = DispatchTable::new(reg.clone());
    fresh
        .add_entry(
            DispatchEntry::new(DispatchKey::for_kind(OpKind::Linear), "linear.slow"),
            EntryOrigin::Builtin,
        )
        .unwrap();
    let loaded = fresh.load_overrides(&path).unwrap();
    let resolved = fresh.resolve(&ctx).unwrap();
    let round_trip = loaded == out.entries.len()
        && resolved.entry == out.entries[0]
        && out.entries.iter().all(|e| e.key.is_concrete());
    let need = (reps * 95).div_ceil(100);
    let detail = format!("fast kernel chosen {wins}/{reps} (need {need}); override file round-trip {round_trip}");
    if wins >= need && round_trip {
        Check::ok(detail)
    } else {
        Check::fail(detail)
    }
}

// ---------------------------------------------------------------------------
// operators

pub fn operator_checks() -> Check {
    let mut rng = Lcg64::new(42);
    // rope fused vs decomposed
    let mut rope_diff = 0.0f32;
    for pos in [0usize, 1, 7, 100, 1000, 4095] {
        for d in [2usize, 8, 16, 64] {
            let mut cos = vec![0.0; d / 2];
            let mut sin = vec![0.0; d / 2];
            rope_table_into(pos, d, 10000.0, &mut cos, &mut sin);
            let x: Vec<f32> = (0..d).map(|_| rng.next_unit_f32() * 4.0 - 2.0).collect();
            let mut a = x.clone();
            let mut b = x.clone();
            let mut rot = vec![0.0; d];
            rope_head_fused(&mut a, &cos, &sin);
            rope_head_decomposed(&mut b, &cos, &sin, &mut rot);
            for (p, q) in a.iter().zip(&b) {
                rope_diff = rope_diff.max((p - q).abs());
            }
        }
    }
    // gelu erf vs tanh on a dense grid
    let mut gelu_diff = 0.0f32;
    for i in 0..=1000 {
        let x = -5.0 + i as f32 * 0.01;
        gelu_diff = gelu_diff.max((gelu_erf_scalar(x) - gelu_tanh_scalar(x)).abs());
    }
    // masked softmax with v_safe
    let mut masked_mass = 0.0f64;
    let mut sum_err = 0.0f64;
    for _ in 0..2000 {
        let n = 2 + rng.next_below(63) as usize;
        let mut row: Vec<f32> = (0..n).map(|_| rng.next_unit_f32() * 200.0 - 100.0).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.next_below(3) != 0).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        masked_softmax_row(&mut row, |j| mask[j], V_SAFE).unwrap();
        let mut s = 0.0f64;
        for (j, &p) in row.iter().enumerate() {
            s += p as f64;
            if !mask[j] {
                masked_mass = masked_mass.max(p as f64);
            }
        }
        sum_err = sum_err.max((s - 1.0).abs());
    }
    let detail = format!(
        "rope max diff {rope_diff:e} (<= 1e-6), gelu erf/tanh max diff {gelu_diff:.4} (<= 0.02), \
         masked prob max {masked_mass:e} (<= 1e-8), row sum err {sum_err:e} (<= 1e-6)"
    );
    if rope_diff <= 1e-6 && gelu_diff <= 0.02 && masked_mass <= 1e-8 && sum_err <= 1e-6 {
        Check::ok(detail)
    } else {
        Check::fail(detail)
    }
}

// ---------------------------------------------------------------------------
// KV compression

/// Per-element round-trip bound against a scalar quantize/dequantize
/// written here in f64.
pub fn compression_bound(blocks: u64) -> Check {
    let c = Compressor::new(Compression::Int8PerChannel);
    let mut worst_ratio = 0.0f64;
    for b in 0..blocks {
        let mut rng = Lcg64::new(90_000 + b);
        let layers = 1 + rng.next_below(3) as usize;
        let positions = 1 + rng.next_below(16) as usize;
        let heads = 1 + rng.next_below(3) as usize;
        let hd = 2 * (1 + rng.next_below(8) as usize);
        let mut block = KvBlock::zeros(layers, positions, heads, hd);
        let amp = [1e-3f32, 1.0, 50.0][(b % 3) as usize];
        for v in &mut block.data {
            *v = (rng.next_unit_f32() * 2.0 - 1.0) * amp;
        }
        if b % 17 == 0 {
            block.data[0] = 0.0;
        }
        let comp = c.compress(&block);
        let back = c.reconstruct(&comp, heads);
        let ch = heads * hd;
        for l in 0..layers {
            for cc in 0..ch {
                let col = |p: usize| block.data[(l * positions + p) * ch + cc];
                let max = (0..positions).map(|p| col(p).abs() as f64).fold(0.0, f64::max);
                let s_exact = max / 127.0;
                let s = comp.scales[l * ch + cc] as f64;
                if s < s_exact || s > s_exact * (1.0 + 1.0 / 32768.0) {
                    return Check::fail(format!("block {b}: scale {s} outside [{s_exact}, +2^-15]"));
                }
                for p in 0..positions {
                    let v = col(p) as f64;
                    let q = if s == 0.0 {
                        0.0
                    } else {
                        (v / s).round().clamp(-127.0, 127.0)
                    };
                    let oracle = q * s;
                    let got = back.data[(l * positions + p) * ch + cc] as f64;
                    if got != oracle {
                        return Check::fail(format!("block {b}: reconstruction {got} != scalar oracle {oracle}"));
                    }
                    let err = (got - v).abs();
                    if err > s / 2.0 + 1e-9 {
                        return Check::fail(format!("block {b}: error {err} > scale/2 = {}", s / 2.0));
                    }
                    if s > 0.0 {
                        worst_ratio = worst_ratio.max(err / s);
                    }
                }
            }
        }
    }
    Check::ok(format!(
        "{blocks} blocks within scale/2 (worst err/scale {worst_ratio:.4})"
    ))
}

/// Greedy output of a prefixed slot before and after its prefix went
/// through a compress, release and re-acquire cycle. Reported, not asserted.
pub fn compression_agreement(seeds: u64) -> (usize, usize) {
    let mut agree = 0;
    let mut total = 0;
    for seed in 0..seeds {
        let mut rng = Lcg64::new(400 + seed);
        let prefix = tokens(&mut rng, 24, 256);
        let req = InferenceRequest::new("z", tokens(&mut rng, 6, 256)).max_new(16);
        let mut cfg = config(64, vec![SlotConfig::new("z", prefix, 16)]);
        cfg.kv.compression = Compression::Int8PerChannel;
        let e = engine(cfg, artifacts(base(seed), None));
        // first request runs on the exact warm prefix and compresses it on release
        let exact = e.execute(&req).unwrap().output_tokens;
        let again = e.execute(&req).unwrap().output_tokens;
        total += exact.len();
        agree += exact.iter().zip(&again).take_while(|(a, b)| a == b).count();
    }
    (agree, total)
}

// ---------------------------------------------------------------------------
// bench

pub fn bench_report_checks(shapes: &[Shape], schema: &serde_json::Value) -> Check {
    let art = Arc::new(generate_reference_base(1));
    let cfg = config(64, vec![]);
    let mut spec = BenchSpec::new(shapes.to_vec());
    spec.warmup_runs = 1;
    spec.timed_runs = 3;
    let report = match run_bench(&cfg, &artifacts(art, None), &spec) {
        Ok(r) => r,
        Err(e) => return Check::fail(format!("bench failed: {e}")),
    };
    let json: serde_json::Value = serde_json::from_str(&report.to_json_string()).unwrap();
    let validator = jsonschema::validator_for(schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(&json).map(|e| e.to_string()).collect();
    if !errors.is_empty() {
        return Check::fail(format!("schema violations: {errors:?}"));
    }
    if report.rows.len() != shapes.len() {
        return Check::fail("row count differs from shape count");
    }
    for (row, s) in report.rows.iter().zip(shapes) {
        if !row.decomposition_ok {
            return Check::fail(format!(
                "{}: decomposition gap {:.4} > 0.05",
                row.shape, row.max_decomposition_gap
            ));
        }
        if row.tokens_per_run.iter().any(|&n| n != s.decode_len) {
            return Check::fail(format!("{}: runs emitted {:?} tokens", row.shape, row.tokens_per_run));
        }
    }
    let gaps: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} gap {:.2e}", r.shape, r.max_decomposition_gap))
        .collect();
    Check::ok(format!("schema valid, exactly D tokens per run, {}", gaps.join(", ")))
}

pub fn load_schema() -> serde_json::Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/schemas/bench_report.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

// ---------------------------------------------------------------------------
// allocation

/// Heap allocations on this thread during `steps` plan replays, and the
/// engine's runtime-buffer counter across a request of `steps` decode
/// steps.
pub fn allocation_flat(steps: usize) -> Check {
    let art = base(3);
    let table = default_table(&art);
    let alloc = AllocCounter::new();
    let prompt = [1u32, 2, 3, 4];
    let cap = prompt.len() + steps + 1;
    let mut kv = kv_for(&art, cap, &alloc);
    let mut runner = ModelRunner::new(art.clone(), prompt.len(), cap, &alloc);
    runner.prefill(&prompt, &mut kv, &table).unwrap();
    let first = argmax(runner.logits(0));
    let mut plan = StepPlan::capture(art.clone(), first, &mut kv, &table, None, &alloc).unwrap();
    let mut tok = argmax(plan.logits());
    let before = super::thread_allocs();
    for _ in 1..steps {
        let pos = kv.len();
        tok = argmax(plan.replay(tok, pos, &mut kv).unwrap());
    }
    let heap = super::thread_allocs() - before;

    let e = engine(
        config(steps + 16, vec![SlotConfig::new("a", vec![], steps)]),
        artifacts(art, None),
    );
    let rt_before = e.alloc_counter().count();
    let out = e
        .execute(&InferenceRequest::new("a", prompt.to_vec()).max_new(steps))
        .unwrap();
    let rt = e.alloc_counter().count() - rt_before;
    let detail = format!(
        "{} replayed steps: {heap} heap allocations; engine request with {} decode steps: {rt} runtime buffer allocations",
        steps - 1,
        out.output_tokens.len()
    );
    if heap == 0 && rt == 0 && out.output_tokens.len() == steps {
        Check::ok(detail)
    } else {
        Check::fail(detail)
    }
}

// ---------------------------------------------------------------------------
// relative speed

/// Median per-step decode time with the plan vs without, same shape.
pub fn replay_vs_eager(shape: Shape, runs: usize) -> (f64, f64) {
    let art = Arc::new(generate_reference_base(2));
    let cfg = config(64, vec![]);
    let mut medians = [0.0; 2];
    for (i, plan) in [true, false].into_iter().enumerate() {
        let mut spec = BenchSpec::new(vec![shape]);
        spec.warmup_runs = 2;
        spec.timed_runs = runs;
        spec.plan = plan;
        let report = run_bench(&cfg, &artifacts(art.clone(), None), &spec).unwrap();
        medians[i] = report.rows[0].step_ms.median;
    }
    (medians[0], medians[1])
}
