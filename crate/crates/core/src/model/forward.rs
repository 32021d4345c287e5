//! Graph emission and dispatched execution of forward passes.

use std::sync::Arc;

use crate::alloc::AllocCounter;
use crate::artifact::{tensor_id, ArchMeta, ModelArtifact, ModelKind, Param};
use crate::dispatch::{concrete_key, DispatchTable, Stage};
use crate::error::{Error, Result};
use crate::kernels::{Arena, ArenaLayout, Buf, ExecEnv, KernelFault, OpArgs, PlanStep};
use crate::kv::KvStore;

/// One operator call of a pass, with the names it is dispatched under.
#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub args: OpArgs,
    pub layer_role: &'static str,
    pub op_name: String,
}

/// Which rows the output head runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    /// Only the last row; its logits land in row 0.
    Last,
    /// Every row.
    All,
}

/// Operators executed per decoder layer.
pub const OPS_PER_LAYER: usize = 15;

/// Number of operators in a pass of `arch`.
pub fn graph_len(arch: &ArchMeta) -> usize {
    let taps = match arch.kind {
        ModelKind::Base => arch.n_taps(),
        ModelKind::Draft => 0,
    };
    let head = match arch.kind {
        ModelKind::Base => 3,
        ModelKind::Draft => 5,
    };
    arch.n_layers * OPS_PER_LAYER + taps + head
}

/// Emits the operator sequence of one pass over `rows` positions.
pub fn emit_graph(arch: &ArchMeta, rows: usize, logits: LogitRows) -> Vec<OpNode> {
    let h = arch.hidden_dim;
    let id = |p| tensor_id(arch, p);
    let mut g = Vec::with_capacity(graph_len(arch));
    let mut push = |args, layer_role, op_name: String| {
        g.push(OpNode {
            args,
            layer_role,
            op_name,
        })
    };

    push(
        OpArgs::Embed {
            table: id(Param::Embed),
            out: Buf::Hidden,
            rows,
        },
        "embed",
        "embed".into(),
    );
    if arch.kind == ModelKind::Draft {
        push(
            OpArgs::Linear {
                input: Buf::FeatIn,
                weight: id(Param::DraftFc),
                out: Buf::Proj,
                rows,
                in_features: arch.feature_dim(),
                out_features: h,
            },
            "draft_fc",
            "draft.fc".into(),
        );
        push(
            OpArgs::Add {
                acc: Buf::Hidden,
                other: Buf::Proj,
                rows,
                width: h,
            },
            "residual",
            "draft.input_add".into(),
        );
    }
    for l in 0..arch.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let linear = |input, p, out, n_in, n_out| OpArgs::Linear {
            input,
            weight: id(p),
            out,
            rows,
            in_features: n_in,
            out_features: n_out,
        };
        let norm = |p| OpArgs::RmsNorm {
            input: Buf::Hidden,
            weight: id(p),
            out: Buf::Normed,
            row0: 0,
            rows,
            dim: h,
            eps: arch.rmsnorm_eps,
        };
        let rope = |buf, heads| OpArgs::Rope {
            buf,
            rows,
            heads,
            head_dim: arch.head_dim,
            theta: arch.rope_theta,
        };
        let residual = OpArgs::Add {
            acc: Buf::Hidden,
            other: Buf::Proj,
            rows,
            width: h,
        };
        push(norm(Param::AttnNorm(l)), "attn_norm", name("attn_norm"));
        push(
            linear(Buf::Normed, Param::Q(l), Buf::Q, h, arch.q_dim()),
            "q_proj",
            name("q_proj"),
        );
        push(
            linear(Buf::Normed, Param::K(l), Buf::K, h, arch.kv_dim()),
            "k_proj",
            name("k_proj"),
        );
        push(
            linear(Buf::Normed, Param::V(l), Buf::V, h, arch.kv_dim()),
            "v_proj",
            name("v_proj"),
        );
        push(rope(Buf::Q, arch.n_heads), "rope_q", name("rope_q"));
        push(rope(Buf::K, arch.n_kv_heads), "rope_k", name("rope_k"));
        push(
            OpArgs::KvAppend {
                layer: l,
                k: Buf::K,
                v: Buf::V,
                rows,
                kv_heads: arch.n_kv_heads,
                head_dim: arch.head_dim,
            },
            "kv_update",
            name("kv_update"),
        );
        push(
            OpArgs::Attention {
                layer: l,
                q: Buf::Q,
                out: Buf::AttnOut,
                rows,
                heads: arch.n_heads,
                kv_heads: arch.n_kv_heads,
                head_dim: arch.head_dim,
            },
            "attention",
            name("attention"),
        );
        push(
            linear(Buf::AttnOut, Param::O(l), Buf::Proj, arch.q_dim(), h),
            "o_proj",
            name("o_proj"),
        );
        push(residual, "residual", name("attn_residual"));
        push(norm(Param::MlpNorm(l)), "mlp_norm", name("mlp_norm"));
        push(
            linear(Buf::Normed, Param::Up(l), Buf::MlpHidden, h, arch.mlp_dim),
            "up_proj",
            name("up_proj"),
        );
        push(
            OpArgs::Gelu {
                input: Buf::MlpHidden,
                out: Buf::MlpAct,
                rows,
                width: arch.mlp_dim,
            },
            "mlp_act",
            name("mlp_act"),
        );
        push(
            linear(Buf::MlpAct, Param::Down(l), Buf::Proj, arch.mlp_dim, h),
            "down_proj",
            name("down_proj"),
        );
        push(residual, "residual", name("mlp_residual"));
        if arch.kind == ModelKind::Base {
            if let Some(t) = arch.feature_tap_layers.iter().position(|&x| x == l) {
                push(
                    OpArgs::CopyCols {
                        src: Buf::Hidden,
                        dst: Buf::Features,
                        rows,
                        width: h,
                        dst_col: t * h,
                    },
                    "feature_tap",
                    name("feature_tap"),
                );
            }
        }
    }
    let (row0, head_rows) = match logits {
        LogitRows::Last => (rows - 1, 1),
        LogitRows::All => (0, rows),
    };
    push(
        OpArgs::RmsNorm {
            input: Buf::Hidden,
            weight: id(Param::FinalNorm),
            out: Buf::Normed,
            row0,
            rows: head_rows,
            dim: h,
            eps: arch.rmsnorm_eps,
        },
        "final_norm",
        "final_norm".into(),
    );
    push(
        OpArgs::Linear {
            input: Buf::Normed,
            weight: id(Param::LmHead),
            out: Buf::Logits,
            rows: head_rows,
            in_features: h,
            out_features: arch.vocab_size,
        },
        "lm_head",
        "lm_head".into(),
    );
    g
}

pub(crate) fn fault_to_error(impl_id: &str, f: KernelFault) -> Error {
    match f {
        KernelFault::Capacity => Error::Capacity(format!("{impl_id}: kv cache is full")),
        KernelFault::TokenOutOfRange => Error::Range(format!("{impl_id}: token id outside vocabulary")),
        other => Error::Kernel {
            impl_id: impl_id.to_owned(),
            reason: other.describe().to_owned(),
        },
    }
}

/// Resolves and runs every node of `graph`, optionally recording the
/// resolved calls.
pub fn run_graph(
    graph: &[OpNode],
    model_name: &str,
    stage: Stage,
    table: &DispatchTable,
    env: &mut ExecEnv<'_>,
    mut record: Option<&mut Vec<PlanStep>>,
) -> Result<()> {
    let hidden = env.arena.width(Buf::Hidden);
    for node in graph {
        let pos = env.arena.position();
        let ctx = concrete_key(
            model_name,
            node.args.kind(),
            node.layer_role,
            &node.op_name,
            stage,
            node.args.shape_sig(pos, hidden),
        );
        let res = table.resolve(&ctx)?;
        (res.kernel)(&node.args, &res.entry.impl_params, env).map_err(|f| fault_to_error(&res.entry.impl_id, f))?;
        if let Some(rec) = record.as_deref_mut() {
            if !res.capturable {
                return Err(Error::CaptureUnsupported {
                    impl_id: res.entry.impl_id.clone(),
                });
            }
            rec.push(PlanStep {
                impl_id: res.entry.impl_id.clone(),
                op_name: node.op_name.clone(),
                kernel: res.kernel,
                args: node.args,
                params: res.entry.impl_params.clone(),
            });
        }
    }
    Ok(())
}

/// Checks that `kv` can hold this model's keys and values.
pub fn check_geometry(arch: &ArchMeta, kv: &KvStore) -> Result<()> {
    let g = kv.geometry();
    if (g.n_layers, g.n_kv_heads, g.head_dim) != arch.kv_shape() {
        return Err(Error::ArchMismatch(format!(
            "slot geometry {}x{}x{} does not fit model {:?}",
            g.n_layers,
            g.n_kv_heads,
            g.head_dim,
            arch.kv_shape()
        )));
    }
    Ok(())
}

pub(crate) fn check_tokens(arch: &ArchMeta, tokens: &[u32]) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= arch.vocab_size) {
        return Err(Error::Range(format!("token id {t} >= vocab_size {}", arch.vocab_size)));
    }
    Ok(())
}

/// Inputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Pass<'a> {
    pub tokens: &'a [u32],
    pub stage: Stage,
    pub logits: LogitRows,
    /// Draft models: base features fed to every row.
    pub features: Option<&'a [f32]>,
}

impl<'a> Pass<'a> {
    pub fn prefill(tokens: &'a [u32]) -> Self {
        Self {
            tokens,
            stage: Stage::Prefill,
            logits: LogitRows::Last,
            features: None,
        }
    }

    pub fn decode(tokens: &'a [u32]) -> Self {
        Self {
            tokens,
            stage: Stage::Decode,
            logits: LogitRows::Last,
            features: None,
        }
    }

    pub fn all_logits(mut self) -> Self {
        self.logits = LogitRows::All;
        self
    }

    pub fn with_features(mut self, features: &'a [f32]) -> Self {
        self.features = Some(features);
        self
    }
}

/// Runs one pass of `artifact` appending to `kv`; results stay in `arena`.
pub fn forward_pass(
    artifact: &ModelArtifact,
    kv: &mut KvStore,
    table: &DispatchTable,
    arena: &mut Arena,
    pass: Pass<'_>,
) -> Result<()> {
    let arch = &artifact.arch;
    let rows = pass.tokens.len();
    if rows == 0 {
        return Err(Error::Validation("forward pass needs at least one token".into()));
    }
    check_tokens(arch, pass.tokens)?;
    check_geometry(arch, kv)?;
    if rows > arena.rows() {
        return Err(Error::Capacity(format!(
            "{rows} positions exceed the {}-row scratch arena",
            arena.rows()
        )));
    }
    if kv.len() + rows > kv.capacity() || kv.capacity() > arena.width(Buf::Scores) {
        return Err(Error::Capacity(format!(
            "{} cached + {rows} new positions exceed slot capacity {}",
            kv.len(),
            kv.capacity()
        )));
    }
    if arch.kind == ModelKind::Draft {
        let f = pass
            .features
            .ok_or_else(|| Error::Validation("draft pass needs base features".into()))?;
        let fd = arch.feature_dim();
        if f.len() != fd {
            return Err(Error::Shape(format!(
                "base features have {} values, expected {fd}",
                f.len()
            )));
        }
        let buf = arena.buf_mut(Buf::FeatIn);
        for r in 0..rows {
            buf[r * fd..(r + 1) * fd].copy_from_slice(f);
        }
    }
    arena.set_tokens(pass.tokens);
    arena.set_position(kv.len());
    let graph = emit_graph(arch, rows, pass.logits);
    let mut env = ExecEnv {
        arena,
        weights: artifact.tensors(),
        kv,
    };
    run_graph(&graph, &arch.model_name, pass.stage, table, &mut env, None)
}

/// Logits and base features of one position.
#[derive(Debug, Clone, PartialEq)]
pub struct PassOutput {
    pub logits: Vec<f32>,
    pub features: Vec<f32>,
}

/// A model plus a scratch arena sized for passes of up to `max_rows`.
#[derive(Debug)]
pub struct ModelRunner {
    artifact: Arc<ModelArtifact>,
    arena: Arena,
}

impl ModelRunner {
    pub fn new(artifact: Arc<ModelArtifact>, max_rows: usize, kv_capacity: usize, alloc: &AllocCounter) -> Self {
        let layout = ArenaLayout::for_arch(&artifact.arch, max_rows.max(1), kv_capacity);
        Self {
            arena: Arena::new(layout, alloc),
            artifact,
        }
    }

    pub fn artifact(&self) -> &Arc<ModelArtifact> {
        &self.artifact
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    pub fn arena_mut(&mut self) -> &mut Arena {
        &mut self.arena
    }

    pub fn run(&mut self, kv: &mut KvStore, table: &DispatchTable, pass: Pass<'_>) -> Result<()> {
        forward_pass(&self.artifact, kv, table, &mut self.arena, pass)
    }

    /// Logits of output row `r` (row 0 is the last position in
    /// [`LogitRows::Last`] mode).
    pub fn logits(&self, r: usize) -> &[f32] {
        self.arena.row(Buf::Logits, r)
    }

    /// Concatenated tap features of input row `r`.
    pub fn features(&self, r: usize) -> &[f32] {
        self.arena.row(Buf::Features, r)
    }

    /// Prefill: appends every token, returns logits and features of the last.
    pub fn prefill(&mut self, tokens: &[u32], kv: &mut KvStore, table: &DispatchTable) -> Result<PassOutput> {
        self.run(kv, table, Pass::prefill(tokens))?;
        Ok(self.output(0, tokens.len() - 1))
    }

    /// Prefill returning the logits of every position.
    pub fn prefill_all(&mut self, tokens: &[u32], kv: &mut KvStore, table: &DispatchTable) -> Result<Vec<Vec<f32>>> {
        self.run(kv, table, Pass::prefill(tokens).all_logits())?;
        Ok((0..tokens.len()).map(|r| self.logits(r).to_vec()).collect())
    }

    pub fn decode_step(&mut self, token: u32, kv: &mut KvStore, table: &DispatchTable) -> Result<PassOutput> {
        self.run(kv, table, Pass::decode(&[token]))?;
        Ok(self.output(0, 0))
    }

    fn output(&self, logit_row: usize, feature_row: usize) -> PassOutput {
        PassOutput {
            logits: self.logits(logit_row).to_vec(),
            features: if self.artifact.arch.kind == ModelKind::Base {
                self.features(feature_row).to_vec()
            } else {
                Vec::new()
            },
        }
    }
}

/// Prefill `tokens` into `kv` with a one-off scratch arena.
pub fn forward_prefill(
    artifact: &Arc<ModelArtifact>,
    tokens: &[u32],
    kv: &mut KvStore,
    table: &DispatchTable,
) -> Result<PassOutput> {
    let mut r = ModelRunner::new(artifact.clone(), tokens.len(), kv.capacity(), &AllocCounter::new());
    r.prefill(tokens, kv, table)
}

/// One decode step with a one-off scratch arena.
pub fn forward_decode_step(
    artifact: &Arc<ModelArtifact>,
    token: u32,
    kv: &mut KvStore,
    table: &DispatchTable,
) -> Result<PassOutput> {
    let mut r = ModelRunner::new(artifact.clone(), 1, kv.capacity(), &AllocCounter::new());
    r.decode_step(token, kv, table)
}
