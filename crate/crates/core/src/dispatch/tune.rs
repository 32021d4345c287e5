//! Auto-tuning: times every applicable kernel on synthetic data shaped like
//! each observed context and emits one concrete entry per context.

use std::time::Instant;

use super::key::{parse_shape_sig, DispatchKey, OpKind, Stage};
use super::table::{DispatchEntry, DispatchTable};
use crate::alloc::AllocCounter;
use crate::artifact::{Tensor, TensorId};
use crate::error::{Error, Result};
use crate::kernels::{Arena, ArenaLayout, Buf, ExecEnv, KernelFn, KernelRegistry, OpArgs, ParamMap};
use crate::kv::{KvGeometry, KvStore};
use crate::rng::Lcg64;

#[derive(Debug, Clone)]
pub struct CandidateTiming {
    pub impl_id: String,
    pub params: ParamMap,
    pub samples_ns: Vec<u64>,
    pub median_ns: u64,
}

#[derive(Debug, Clone)]
pub struct TuneSession {
    pub context: DispatchKey,
    pub candidates: Vec<CandidateTiming>,
    /// Index into `candidates` of the emitted choice.
    pub chosen: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TuneOutcome {
    pub entries: Vec<DispatchEntry>,
    pub sessions: Vec<TuneSession>,
}

/// Tunes each context in `contexts` (duplicates are tuned once).
///
/// Candidates are the registered impls of the context's op kind that
/// support its stage and compute the same function as the impl the table
/// currently resolves to, each with every parameter set of its tuning
/// space.
pub fn auto_tune(
    table: &DispatchTable,
    contexts: &[DispatchKey],
    registry: &KernelRegistry,
    warmups: usize,
    reps: usize,
) -> Result<TuneOutcome> {
    if warmups < 1 {
        return Err(Error::Validation("auto_tune needs at least one warmup run".into()));
    }
    if reps < 3 || reps.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "auto_tune reps must be odd and >= 3, got {reps}"
        )));
    }
    let mut out = TuneOutcome::default();
    let mut seen = std::collections::HashSet::new();
    for ctx in contexts {
        if !seen.insert(ctx.clone()) {
            continue;
        }
        let session = tune_one(table, ctx, registry, warmups, reps)?;
        let best = &session.candidates[session.chosen];
        out.entries
            .push(DispatchEntry::new(ctx.clone(), best.impl_id.clone()).with_params(best.params.clone()));
        out.sessions.push(session);
    }
    Ok(out)
}

fn tune_one(
    table: &DispatchTable,
    ctx: &DispatchKey,
    registry: &KernelRegistry,
    warmups: usize,
    reps: usize,
) -> Result<TuneSession> {
    let no_cands = || Error::NoCandidates(ctx.to_string());
    if !ctx.is_concrete() {
        return Err(Error::Validation(format!("tuning context {ctx} has wildcards")));
    }
    let kind = OpKind::parse(&ctx.op_kind).ok_or_else(no_cands)?;
    let stage = Stage::parse(&ctx.stage).ok_or_else(no_cands)?;
    let semantics = table
        .lookup(ctx)
        .and_then(|te| registry.get(&te.entry.impl_id))
        .map(|k| k.semantics.clone());
    let mut cands: Vec<(String, ParamMap, KernelFn)> = Vec::new();
    for k in registry.by_kind(kind) {
        if !k.supports(stage) || semantics.as_ref().is_some_and(|s| *s != k.semantics) {
            continue;
        }
        for p in k.candidate_params() {
            cands.push((k.impl_id.clone(), p, k.run));
        }
    }
    if cands.is_empty() {
        return Err(no_cands());
    }
    let dims: Vec<usize> = parse_shape_sig(&ctx.shape_sig, Some(kind))?
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let mut harness = Harness::new(kind, &dims)?;
    let mut candidates = Vec::with_capacity(cands.len());
    for (impl_id, params, run) in cands {
        for _ in 0..warmups {
            harness.run(run, &params, &impl_id)?;
        }
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            harness.run(run, &params, &impl_id)?;
            samples.push(t.elapsed().as_nanos() as u64);
        }
        let mut sorted = samples.clone();
        sorted.sort_unstable();
        candidates.push(CandidateTiming {
            impl_id,
            params,
            median_ns: sorted[reps / 2],
            samples_ns: samples,
        });
    }
    let chosen = candidates
        .iter()
        .enumerate()
        .min_by_key(|(_, c)| c.median_ns)
        .map(|(i, _)| i)
        .expect("non-empty");
    Ok(TuneSession {
        context: ctx.clone(),
        candidates,
        chosen,
    })
}

/// Synthetic buffers and weights for one operator shape.
struct Harness {
    arena: Arena,
    weights: Vec<Tensor>,
    kv: KvStore,
    args: OpArgs,
    /// kv_update appends, so the cache is rewound before every run.
    rewind_kv: Option<usize>,
}

fn random(rng: &mut Lcg64, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.next_param()).collect()
}

impl Harness {
    fn new(kind: OpKind, d: &[usize]) -> Result<Self> {
        let alloc = AllocCounter::new();
        let mut rng = Lcg64::new(0x5eed);
        let tensor = |name: &str, shape: Vec<usize>, rng: &mut Lcg64| Tensor {
            name: name.into(),
            data: random(rng, shape.iter().product()),
            shape,
        };
        let mut weights = Vec::new();
        let mut kv_geom = KvGeometry {
            n_layers: 1,
            n_kv_heads: 1,
            head_dim: 1,
            capacity: 1,
        };
        let mut rewind_kv = None;
        let mut prefill_kv = 0;
        let (layout, args) = match kind {
            OpKind::Linear => {
                let (m, n_in, n_out) = (d[0], d[1], d[2]);
                weights.push(tensor("w", vec![n_out, n_in], &mut rng));
                (
                    ArenaLayout::empty(m)
                        .with_width(Buf::Normed, n_in)
                        .with_width(Buf::Proj, n_out),
                    OpArgs::Linear {
                        input: Buf::Normed,
                        weight: TensorId(0),
                        out: Buf::Proj,
                        rows: m,
                        in_features: n_in,
                        out_features: n_out,
                    },
                )
            }
            OpKind::Attention => {
                let (q_len, kv_len, heads, hd) = (d[0], d[1], d[2], d[3]);
                if q_len == 0 || q_len > kv_len || heads == 0 {
                    return Err(Error::Validation(format!(
                        "attention shape {d:?} cannot be synthesized"
                    )));
                }
                kv_geom = KvGeometry {
                    n_layers: 1,
                    n_kv_heads: heads,
                    head_dim: hd,
                    capacity: kv_len,
                };
                prefill_kv = kv_len;
                let mut layout = ArenaLayout::empty(q_len)
                    .with_width(Buf::Q, heads * hd)
                    .with_width(Buf::AttnOut, heads * hd);
                layout.set_scratch(hd, kv_len);
                (
                    layout,
                    OpArgs::Attention {
                        layer: 0,
                        q: Buf::Q,
                        out: Buf::AttnOut,
                        rows: q_len,
                        heads,
                        kv_heads: heads,
                        head_dim: hd,
                    },
                )
            }
            OpKind::Rope => {
                let (q_len, heads, hd) = (d[0], d[1], d[2]);
                let mut layout = ArenaLayout::empty(q_len).with_width(Buf::Q, heads * hd);
                layout.set_scratch(hd, 1);
                (
                    layout,
                    OpArgs::Rope {
                        buf: Buf::Q,
                        rows: q_len,
                        heads,
                        head_dim: hd,
                        theta: 10000.0,
                    },
                )
            }
            OpKind::KvUpdate => {
                let (q_len, kvh, hd) = (d[0], d[1], d[2]);
                kv_geom = KvGeometry {
                    n_layers: 1,
                    n_kv_heads: kvh,
                    head_dim: hd,
                    capacity: q_len,
                };
                rewind_kv = Some(0);
                (
                    ArenaLayout::empty(q_len)
                        .with_width(Buf::K, kvh * hd)
                        .with_width(Buf::V, kvh * hd),
                    OpArgs::KvAppend {
                        layer: 0,
                        k: Buf::K,
                        v: Buf::V,
                        rows: q_len,
                        kv_heads: kvh,
                        head_dim: hd,
                    },
                )
            }
            OpKind::Embedding => {
                let (m, h) = (d[0], d[1]);
                weights.push(tensor("embed", vec![256, h], &mut rng));
                (
                    ArenaLayout::empty(m).with_width(Buf::Hidden, h),
                    OpArgs::Embed {
                        table: TensorId(0),
                        out: Buf::Hidden,
                        rows: m,
                    },
                )
            }
            OpKind::Rmsnorm => {
                let (m, f) = (d[0], d[1]);
                weights.push(tensor("norm", vec![f], &mut rng));
                (
                    ArenaLayout::empty(m)
                        .with_width(Buf::Hidden, f)
                        .with_width(Buf::Normed, f),
                    OpArgs::RmsNorm {
                        input: Buf::Hidden,
                        weight: TensorId(0),
                        out: Buf::Normed,
                        row0: 0,
                        rows: m,
                        dim: f,
                        eps: 1e-6,
                    },
                )
            }
            OpKind::Gelu => {
                let (m, f) = (d[0], d[1]);
                (
                    ArenaLayout::empty(m)
                        .with_width(Buf::MlpHidden, f)
                        .with_width(Buf::MlpAct, f),
                    OpArgs::Gelu {
                        input: Buf::MlpHidden,
                        out: Buf::MlpAct,
                        rows: m,
                        width: f,
                    },
                )
            }
            OpKind::Add => {
                let (m, f) = (d[0], d[1]);
                (
                    ArenaLayout::empty(m)
                        .with_width(Buf::Hidden, f)
                        .with_width(Buf::Proj, f),
                    OpArgs::Add {
                        acc: Buf::Hidden,
                        other: Buf::Proj,
                        rows: m,
                        width: f,
                    },
                )
            }
            OpKind::Copy => {
                let (m, f) = (d[0], d[1]);
                (
                    ArenaLayout::empty(m)
                        .with_width(Buf::Hidden, f)
                        .with_width(Buf::Features, f),
                    OpArgs::CopyCols {
                        src: Buf::Hidden,
                        dst: Buf::Features,
                        rows: m,
                        width: f,
                        dst_col: 0,
                    },
                )
            }
        };
        let mut arena = Arena::new(layout, &alloc);
        for b in [
            Buf::Hidden,
            Buf::Normed,
            Buf::Q,
            Buf::K,
            Buf::V,
            Buf::Proj,
            Buf::MlpHidden,
        ] {
            let vals = random(&mut rng, arena.buf(b).len());
            arena.buf_mut(b).copy_from_slice(&vals);
        }
        let toks: Vec<u32> = (0..arena.rows()).map(|_| rng.next_below(256)).collect();
        arena.set_tokens(&toks);
        let mut kv = KvStore::new(kv_geom, &alloc);
        if prefill_kv > 0 {
            let n = prefill_kv * kv_geom.kv_dim();
            let (k, v) = (random(&mut rng, n), random(&mut rng, n));
            kv.append_rows(0, 0, prefill_kv, &k, &v)
                .map_err(|e| Error::Validation(format!("synthetic kv: {e:?}")))?;
        }
        if let OpArgs::Attention { rows, .. } = args {
            arena.set_position(prefill_kv - rows);
        }
        Ok(Self {
            arena,
            weights,
            kv,
            args,
            rewind_kv,
        })
    }

    fn run(&mut self, f: KernelFn, params: &ParamMap, impl_id: &str) -> Result<()> {
        if let Some(n) = self.rewind_kv {
            self.kv.set_len(n);
        }
        let mut env = ExecEnv {
            arena: &mut self.arena,
            weights: &self.weights,
            kv: &mut self.kv,
        };
        f(&self.args, params, &mut env).map_err(|fault| Error::Kernel {
            impl_id: impl_id.to_owned(),
            reason: fault.describe().to_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::artifact::ArchMeta;
    use crate::dispatch::{concrete_key, shape_sig_of};

    fn table() -> DispatchTable {
        DispatchTable::with_defaults(Arc::new(KernelRegistry::builtin()), &[&ArchMeta::reference_base()]).unwrap()
    }

    #[test]
    fn every_kind_can_be_tuned() {
        let t = table();
        let reg = KernelRegistry::builtin();
        let ctxs = vec![
            concrete_key(
                "ref_decoder",
                OpKind::Linear,
                "q_proj",
                "layers.0.q_proj",
                Stage::Decode,
                shape_sig_of(OpKind::Linear, &[1, 64, 64]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::Attention,
                "attention",
                "layers.0.attention",
                Stage::Decode,
                shape_sig_of(OpKind::Attention, &[1, 9, 4, 16]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::Attention,
                "attention",
                "layers.0.attention",
                Stage::Prefill,
                shape_sig_of(OpKind::Attention, &[5, 9, 4, 16]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::Rope,
                "rope_q",
                "layers.0.rope_q",
                Stage::Decode,
                shape_sig_of(OpKind::Rope, &[1, 4, 16]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::KvUpdate,
                "kv_update",
                "layers.0.kv_update",
                Stage::Decode,
                shape_sig_of(OpKind::KvUpdate, &[1, 2, 16]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::Embedding,
                "embed",
                "embed",
                Stage::Decode,
                shape_sig_of(OpKind::Embedding, &[1, 64]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::Gelu,
                "mlp_act",
                "layers.0.mlp_act",
                Stage::Decode,
                shape_sig_of(OpKind::Gelu, &[1, 128]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::Rmsnorm,
                "attn_norm",
                "layers.0.attn_norm",
                Stage::Decode,
                shape_sig_of(OpKind::Rmsnorm, &[1, 64]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::Add,
                "residual",
                "layers.0.attn_residual",
                Stage::Decode,
                shape_sig_of(OpKind::Add, &[1, 64]),
            ),
            concrete_key(
                "ref_decoder",
                OpKind::Copy,
                "feature_tap",
                "layers.0.feature_tap",
                Stage::Decode,
                shape_sig_of(OpKind::Copy, &[1, 64]),
            ),
        ];
        let out = auto_tune(&t, &ctxs, &reg, 1, 3).unwrap();
        assert_eq!(out.entries.len(), ctxs.len());
        assert!(out.entries.iter().all(|e| e.key.is_concrete()));
        // linear: 1 naive + 5 blocked tiles + 1 transposed
        assert_eq!(out.sessions[0].candidates.len(), 7);
        assert_eq!(out.sessions[1].candidates.len(), 2);
        assert_eq!(out.sessions[2].candidates.len(), 1);
        // gelu variants differ in meaning and are never swapped
        assert_eq!(out.entries[6].impl_id, "gelu.erf");
    }

    #[test]
    fn rep_count_rules() {
        let t = table();
        let reg = KernelRegistry::builtin();
        assert!(auto_tune(&t, &[], &reg, 0, 3).is_err());
        assert!(auto_tune(&t, &[], &reg, 1, 4).is_err());
        assert!(auto_tune(&t, &[], &reg, 1, 1).is_err());
    }
}
