use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HW_PROFILE_CPU_REF: &str = "cpu_ref";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "prefill" => Some(Stage::Prefill),
            "decode" => Some(Stage::Decode),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Linear,
    Attention,
    Rope,
    Gelu,
    Rmsnorm,
    KvUpdate,
    Embedding,
    Add,
    Copy,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Linear,
        OpKind::Attention,
        OpKind::Rope,
        OpKind::Gelu,
        OpKind::Rmsnorm,
        OpKind::KvUpdate,
        OpKind::Embedding,
        OpKind::Add,
        OpKind::Copy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Linear => "linear",
            OpKind::Attention => "attention",
            OpKind::Rope => "rope",
            OpKind::Gelu => "gelu",
            OpKind::Rmsnorm => "rmsnorm",
            OpKind::KvUpdate => "kv_update",
            OpKind::Embedding => "embedding",
            OpKind::Add => "add",
            OpKind::Copy => "copy",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Shape signature keys, in canonical order.
    pub fn sig_keys(self) -> &'static [&'static str] {
        match self {
            OpKind::Linear => &["m", "in_features", "out_features"],
            OpKind::Attention => &["q_len", "kv_len", "heads", "head_dim"],
            OpKind::Rope => &["q_len", "heads", "head_dim"],
            OpKind::KvUpdate => &["q_len", "kv_heads", "head_dim"],
            OpKind::Embedding => &["m", "hidden"],
            OpKind::Gelu | OpKind::Rmsnorm | OpKind::Add | OpKind::Copy => &["m", "features"],
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical shape signature: `key=value|key=value...` in the op kind's key order.
pub fn shape_sig_of(kind: OpKind, dims: &[usize]) -> String {
    let keys = kind.sig_keys();
    assert_eq!(keys.len(), dims.len(), "{kind}: expected {} dims", keys.len());
    let mut out = String::new();
    for (i, (k, v)) in keys.iter().zip(dims).enumerate() {
        if i > 0 {
            out.push('|');
        }
        out.push_str(k);
        out.push('=');
        out.push_str(&v.to_string());
    }
    out
}

/// Parses a shape signature. With `kind` given, the keys must match its
/// canonical order exactly.
pub fn parse_shape_sig(sig: &str, kind: Option<OpKind>) -> Result<Vec<(String, usize)>> {
    let bad = |why: &str| Error::Parse(format!("shape_sig {sig:?}: {why}"));
    let mut out = Vec::new();
    for part in sig.split('|') {
        let (k, v) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        if k.is_empty() || !k.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
            return Err(bad("bad key"));
        }
        if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad("values must be decimal integers"));
        }
        let n = v.parse::<usize>().map_err(|_| bad("value out of range"))?;
        if v != n.to_string() {
            return Err(bad("non-canonical integer"));
        }
        out.push((k.to_owned(), n));
    }
    if let Some(kind) = kind {
        let keys: Vec<&str> = out.iter().map(|(k, _)| k.as_str()).collect();
        if keys != kind.sig_keys() {
            return Err(bad(&format!("keys must be {:?} for {kind}", kind.sig_keys())));
        }
    }
    Ok(out)
}

/// One row key of the operator implementation table. An empty string is a
/// wildcard on that dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct DispatchKey {
    pub model_name: String,
    pub hw_profile: String,
    pub op_kind: String,
    pub layer_role: String,
    pub op_name: String,
    pub stage: String,
    pub shape_sig: String,
}

impl DispatchKey {
    /// Generic key matching every context of one op kind.
    pub fn for_kind(kind: OpKind) -> Self {
        Self {
            op_kind: kind.as_str().into(),
            ..Default::default()
        }
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage.as_str().into();
        self
    }

    pub fn with_model(mut self, model: &str) -> Self {
        self.model_name = model.into();
        self
    }

    /// Fields in tie-break priority order, most discriminating first.
    pub fn fields_by_priority(&self) -> [&str; 7] {
        [
            &self.shape_sig,
            &self.stage,
            &self.op_name,
            &self.layer_role,
            &self.op_kind,
            &self.hw_profile,
            &self.model_name,
        ]
    }

    pub fn specificity(&self) -> usize {
        self.fields_by_priority().iter().filter(|f| !f.is_empty()).count()
    }

    pub fn is_concrete(&self) -> bool {
        self.specificity() == 7
    }

    /// Every non-wildcard field of `self` equals the same field of `ctx`.
    pub fn matches(&self, ctx: &DispatchKey) -> bool {
        self.fields_by_priority()
            .iter()
            .zip(ctx.fields_by_priority())
            .all(|(mine, theirs)| mine.is_empty() || *mine == theirs)
    }
}

impl fmt::Display for DispatchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}/{}/{}",
            self.model_name, self.hw_profile, self.op_kind, self.layer_role, self.op_name, self.stage, self.shape_sig
        )
    }
}
