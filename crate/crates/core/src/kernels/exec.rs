//! Buffers and argument records that kernels operate on.

use std::collections::BTreeMap;

use crate::alloc::AllocCounter;
use crate::artifact::{ArchMeta, Tensor, TensorId};
use crate::dispatch::{shape_sig_of, OpKind};
use crate::kv::KvStore;

/// Named activation buffers. Row-shaped buffers hold `rows x width` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Buf {
    Hidden,
    Normed,
    Q,
    K,
    V,
    AttnOut,
    Proj,
    MlpHidden,
    MlpAct,
    Logits,
    Features,
    FeatIn,
    /// Rope scratch: cos and sin halves, then one rotate-half head.
    Rot,
    /// Attention scores for one query row.
    Scores,
}

const N_BUFS: usize = 14;

impl Buf {
    fn idx(self) -> usize {
        self as usize
    }
}

/// Widths of the row buffers plus scratch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArenaLayout {
    pub widths: [usize; N_BUFS],
    pub rows: usize,
}

impl ArenaLayout {
    pub fn for_arch(arch: &ArchMeta, rows: usize, kv_capacity: usize) -> Self {
        let mut widths = [0; N_BUFS];
        widths[Buf::Hidden.idx()] = arch.hidden_dim;
        widths[Buf::Normed.idx()] = arch.hidden_dim;
        widths[Buf::Q.idx()] = arch.q_dim();
        widths[Buf::K.idx()] = arch.kv_dim();
        widths[Buf::V.idx()] = arch.kv_dim();
        widths[Buf::AttnOut.idx()] = arch.q_dim();
        widths[Buf::Proj.idx()] = arch.hidden_dim;
        widths[Buf::MlpHidden.idx()] = arch.mlp_dim;
        widths[Buf::MlpAct.idx()] = arch.mlp_dim;
        widths[Buf::Logits.idx()] = arch.vocab_size;
        widths[Buf::Features.idx()] = arch.feature_dim();
        widths[Buf::FeatIn.idx()] = arch.feature_dim();
        let mut layout = Self { widths, rows };
        layout.set_scratch(arch.head_dim, kv_capacity);
        layout
    }

    /// Empty layout; callers set the widths they need.
    pub fn empty(rows: usize) -> Self {
        Self {
            widths: [0; N_BUFS],
            rows,
        }
    }

    pub fn with_width(mut self, buf: Buf, width: usize) -> Self {
        self.widths[buf.idx()] = width;
        self
    }

    pub fn set_scratch(&mut self, head_dim: usize, kv_capacity: usize) {
        // cos and sin halves plus one rotate-half head
        self.widths[Buf::Rot.idx()] = 2 * head_dim;
        self.widths[Buf::Scores.idx()] = kv_capacity;
    }

    fn len_of(&self, b: usize) -> usize {
        if b == Buf::Rot.idx() || b == Buf::Scores.idx() {
            self.widths[b]
        } else {
            self.widths[b] * self.rows
        }
    }
}

/// Pre-allocated activation memory for one model and one maximum pass size.
///
/// `tokens` and `position` are the dynamic inputs of a pass: a replayed
/// step plan only rewrites these two before running.
#[derive(Debug, Clone)]
pub struct Arena {
    layout: ArenaLayout,
    bufs: Vec<Vec<f32>>,
    pub(crate) tokens: Vec<u32>,
    pub(crate) position: usize,
}

impl Arena {
    pub fn new(layout: ArenaLayout, alloc: &AllocCounter) -> Self {
        let bufs = (0..N_BUFS).map(|b| alloc.zeros(layout.len_of(b))).collect();
        Self {
            layout,
            bufs,
            tokens: alloc.zeros(layout.rows),
            position: 0,
        }
    }

    pub fn layout(&self) -> ArenaLayout {
        self.layout
    }

    pub fn rows(&self) -> usize {
        self.layout.rows
    }

    pub fn width(&self, b: Buf) -> usize {
        self.layout.widths[b.idx()]
    }

    pub fn buf(&self, b: Buf) -> &[f32] {
        &self.bufs[b.idx()]
    }

    pub fn buf_mut(&mut self, b: Buf) -> &mut [f32] {
        &mut self.bufs[b.idx()]
    }

    /// Row `r` of a row buffer.
    pub fn row(&self, b: Buf, r: usize) -> &[f32] {
        let w = self.width(b);
        &self.bufs[b.idx()][r * w..(r + 1) * w]
    }

    /// Mutable views of two different buffers.
    pub fn pair_mut(&mut self, a: Buf, b: Buf) -> (&mut [f32], &mut [f32]) {
        let (ia, ib) = (a.idx(), b.idx());
        assert_ne!(ia, ib, "pair needs two distinct buffers");
        if ia < ib {
            let (lo, hi) = self.bufs.split_at_mut(ib);
            (&mut lo[ia], &mut hi[0])
        } else {
            let (lo, hi) = self.bufs.split_at_mut(ia);
            (&mut hi[0], &mut lo[ib])
        }
    }

    /// Shared view of `src` and mutable view of `dst`.
    pub fn pair(&mut self, src: Buf, dst: Buf) -> (&[f32], &mut [f32]) {
        let (s, d) = self.pair_mut(src, dst);
        (s, d)
    }

    /// Mutable `a`, shared `b` and mutable scratch `c` (all distinct).
    pub fn triple(&mut self, a: Buf, b: Buf, c: Buf) -> (&mut [f32], &[f32], &mut [f32]) {
        let (ia, ib, ic) = (a.idx(), b.idx(), c.idx());
        assert!(ia != ib && ib != ic && ia != ic);
        let mut refs: [Option<&mut Vec<f32>>; N_BUFS] = Default::default();
        for (i, v) in self.bufs.iter_mut().enumerate() {
            refs[i] = Some(v);
        }
        let ra = refs[ia].take().expect("distinct");
        let rb = refs[ib].take().expect("distinct");
        let rc = refs[ic].take().expect("distinct");
        (ra, rb, rc)
    }

    /// Writes dynamic token inputs.
    pub fn set_tokens(&mut self, tokens: &[u32]) {
        self.tokens[..tokens.len()].copy_from_slice(tokens);
    }

    pub fn set_position(&mut self, pos: usize) {
        self.position = pos;
    }

    pub fn position(&self) -> usize {
        self.position
    }
}

/// Static arguments of one operator call. `rows` is the number of query
/// positions; the absolute position comes from [`Arena::position`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpArgs {
    Embed {
        table: TensorId,
        out: Buf,
        rows: usize,
    },
    RmsNorm {
        input: Buf,
        weight: TensorId,
        out: Buf,
        row0: usize,
        rows: usize,
        dim: usize,
        eps: f32,
    },
    Linear {
        input: Buf,
        weight: TensorId,
        out: Buf,
        rows: usize,
        in_features: usize,
        out_features: usize,
    },
    Rope {
        buf: Buf,
        rows: usize,
        heads: usize,
        head_dim: usize,
        theta: f32,
    },
    KvAppend {
        layer: usize,
        k: Buf,
        v: Buf,
        rows: usize,
        kv_heads: usize,
        head_dim: usize,
    },
    Attention {
        layer: usize,
        q: Buf,
        out: Buf,
        rows: usize,
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
    },
    Gelu {
        input: Buf,
        out: Buf,
        rows: usize,
        width: usize,
    },
    Add {
        acc: Buf,
        other: Buf,
        rows: usize,
        width: usize,
    },
    CopyCols {
        src: Buf,
        dst: Buf,
        rows: usize,
        width: usize,
        dst_col: usize,
    },
}

impl OpArgs {
    pub fn kind(&self) -> OpKind {
        match self {
            OpArgs::Embed { .. } => OpKind::Embedding,
            OpArgs::RmsNorm { .. } => OpKind::Rmsnorm,
            OpArgs::Linear { .. } => OpKind::Linear,
            OpArgs::Rope { .. } => OpKind::Rope,
            OpArgs::KvAppend { .. } => OpKind::KvUpdate,
            OpArgs::Attention { .. } => OpKind::Attention,
            OpArgs::Gelu { .. } => OpKind::Gelu,
            OpArgs::Add { .. } => OpKind::Add,
            OpArgs::CopyCols { .. } => OpKind::Copy,
        }
    }

    /// Concrete shape dimensions in signature order; `position` is the
    /// absolute position of the first row.
    pub fn dims(&self, position: usize, hidden: usize) -> Vec<usize> {
        match *self {
            OpArgs::Embed { rows, .. } => vec![rows, hidden],
            OpArgs::RmsNorm { rows, dim, .. } => vec![rows, dim],
            OpArgs::Linear {
                rows,
                in_features,
                out_features,
                ..
            } => vec![rows, in_features, out_features],
            OpArgs::Rope {
                rows, heads, head_dim, ..
            } => vec![rows, heads, head_dim],
            OpArgs::KvAppend {
                rows,
                kv_heads,
                head_dim,
                ..
            } => vec![rows, kv_heads, head_dim],
            OpArgs::Attention {
                rows, heads, head_dim, ..
            } => vec![rows, position + rows, heads, head_dim],
            OpArgs::Gelu { rows, width, .. }
            | OpArgs::Add { rows, width, .. }
            | OpArgs::CopyCols { rows, width, .. } => vec![rows, width],
        }
    }

    pub fn shape_sig(&self, position: usize, hidden: usize) -> String {
        shape_sig_of(self.kind(), &self.dims(position, hidden))
    }

    pub fn rows(&self) -> usize {
        match *self {
            OpArgs::Embed { rows, .. }
            | OpArgs::RmsNorm { rows, .. }
            | OpArgs::Linear { rows, .. }
            | OpArgs::Rope { rows, .. }
            | OpArgs::KvAppend { rows, .. }
            | OpArgs::Attention { rows, .. }
            | OpArgs::Gelu { rows, .. }
            | OpArgs::Add { rows, .. }
            | OpArgs::CopyCols { rows, .. } => rows,
        }
    }
}

/// Implementation-specific parameters (`impl_params`).
pub type ParamMap = BTreeMap<String, serde_json::Value>;

/// Everything a kernel may touch.
pub struct ExecEnv<'a> {
    pub arena: &'a mut Arena,
    pub weights: &'a [Tensor],
    pub kv: &'a mut KvStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFault {
    Capacity,
    FrozenPrefix,
    NotAppend,
    TokenOutOfRange,
    /// Keys needed by attention have not been written yet.
    MissingKv,
    Unsupported(&'static str),
}

impl KernelFault {
    pub fn describe(self) -> &'static str {
        match self {
            KernelFault::Capacity => "kv capacity exceeded",
            KernelFault::FrozenPrefix => "write into frozen prefix",
            KernelFault::NotAppend => "kv write is not an append at the current length",
            KernelFault::TokenOutOfRange => "token id outside vocabulary",
            KernelFault::MissingKv => "attention reads positions not in the kv cache",
            KernelFault::Unsupported(why) => why,
        }
    }
}

pub type KernelFn = fn(&OpArgs, &ParamMap, &mut ExecEnv<'_>) -> Result<(), KernelFault>;
