//! Model artifacts: architecture metadata, the parameter manifest and the
//! in-memory tensor set.

mod efmt;
mod generate;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use efmt::{read_artifact, write_artifact, EFMT_MAGIC, PAYLOAD_ALIGN};
pub use generate::{generate_artifact, generate_reference_base, generate_reference_draft};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Base,
    /// Single-stack draft model conditioned on base-model features.
    Draft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluVariant {
    Tanh,
    Erf,
}

impl GeluVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GeluVariant::Tanh => "tanh",
            GeluVariant::Erf => "erf",
        }
    }
}

fn default_model_name() -> String {
    "ref_decoder".to_owned()
}

/// Architecture metadata stored in the artifact header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchMeta {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub rope_theta: f32,
    pub rmsnorm_eps: f32,
    pub gelu_variant: GeluVariant,
    /// Base: layers whose outputs are exported as features.
    /// Draft: the base layers whose features it consumes.
    pub feature_tap_layers: Vec<usize>,
}

impl ArchMeta {
    /// The 4-layer grouped-KV reference decoder.
    pub fn reference_base() -> Self {
        Self {
            kind: ModelKind::Base,
            model_name: default_model_name(),
            vocab_size: 256,
            hidden_dim: 64,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            mlp_dim: 128,
            rope_theta: 10000.0,
            rmsnorm_eps: 1e-6,
            gelu_variant: GeluVariant::Erf,
            feature_tap_layers: vec![0, 2, 3],
        }
    }

    /// One-layer draft model paired with [`ArchMeta::reference_base`].
    pub fn reference_draft() -> Self {
        Self {
            kind: ModelKind::Draft,
            model_name: "ref_draft".to_owned(),
            n_layers: 1,
            ..Self::reference_base()
        }
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn n_taps(&self) -> usize {
        self.feature_tap_layers.len()
    }

    /// Width of the concatenated feature vector.
    pub fn feature_dim(&self) -> usize {
        self.n_taps() * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.n_layers == 0 {
            return bad("vocab_size, hidden_dim and n_layers must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 || self.mlp_dim == 0 {
            return bad("head counts, head_dim and mlp_dim must be positive".into());
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return bad(format!(
                "hidden_dim {} != n_heads {} x head_dim {}",
                self.hidden_dim, self.n_heads, self.head_dim
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary embedding", self.head_dim));
        }
        if !(self.rmsnorm_eps > 0.0) || !(self.rope_theta > 0.0) {
            return bad("rmsnorm_eps and rope_theta must be positive".into());
        }
        match self.kind {
            ModelKind::Base => {
                if let Some(&l) = self.feature_tap_layers.iter().find(|&&l| l >= self.n_layers) {
                    return bad(format!("feature tap layer {l} out of range"));
                }
            }
            ModelKind::Draft => {
                if self.feature_tap_layers.is_empty() {
                    return bad("draft model needs at least one feature tap layer".into());
                }
            }
        }
        Ok(())
    }

    /// The KV geometry a slot needs to serve this model.
    pub fn kv_shape(&self) -> (usize, usize, usize) {
        (self.n_layers, self.n_kv_heads, self.head_dim)
    }
}

/// One named parameter of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    Embed,
    DraftFc,
    AttnNorm(usize),
    Q(usize),
    K(usize),
    V(usize),
    O(usize),
    MlpNorm(usize),
    Up(usize),
    Down(usize),
    FinalNorm,
    LmHead,
}

const PER_LAYER: usize = 8;

/// Index of a tensor inside [`ModelArtifact::tensors`]; stable for a given
/// architecture because tensors are kept in manifest order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

impl Param {
    fn layer_slot(self) -> Option<(usize, usize)> {
        match self {
            Param::AttnNorm(l) => Some((l, 0)),
            Param::Q(l) => Some((l, 1)),
            Param::K(l) => Some((l, 2)),
            Param::V(l) => Some((l, 3)),
            Param::O(l) => Some((l, 4)),
            Param::MlpNorm(l) => Some((l, 5)),
            Param::Up(l) => Some((l, 6)),
            Param::Down(l) => Some((l, 7)),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            Param::Embed => "embed.weight".into(),
            Param::DraftFc => "draft.fc.weight".into(),
            Param::AttnNorm(l) => format!("layers.{l}.attn_norm.weight"),
            Param::Q(l) => format!("layers.{l}.attn.q_proj.weight"),
            Param::K(l) => format!("layers.{l}.attn.k_proj.weight"),
            Param::V(l) => format!("layers.{l}.attn.v_proj.weight"),
            Param::O(l) => format!("layers.{l}.attn.o_proj.weight"),
            Param::MlpNorm(l) => format!("layers.{l}.mlp_norm.weight"),
            Param::Up(l) => format!("layers.{l}.mlp.up_proj.weight"),
            Param::Down(l) => format!("layers.{l}.mlp.down_proj.weight"),
            Param::FinalNorm => "final_norm.weight".into(),
            Param::LmHead => "lm_head.weight".into(),
        }
    }

    pub fn shape(self, arch: &ArchMeta) -> Vec<usize> {
        let h = arch.hidden_dim;
        match self {
            Param::Embed | Param::LmHead => vec![arch.vocab_size, h],
            Param::DraftFc => vec![h, arch.feature_dim()],
            Param::AttnNorm(_) | Param::MlpNorm(_) | Param::FinalNorm => vec![h],
            Param::Q(_) => vec![arch.q_dim(), h],
            Param::K(_) | Param::V(_) => vec![arch.kv_dim(), h],
            Param::O(_) => vec![h, arch.q_dim()],
            Param::Up(_) => vec![arch.mlp_dim, h],
            Param::Down(_) => vec![h, arch.mlp_dim],
        }
    }
}

/// The ordered parameter list every artifact of `arch` must contain.
pub fn manifest(arch: &ArchMeta) -> Vec<Param> {
    let mut out = vec![Param::Embed];
    if arch.kind == ModelKind::Draft {
        out.push(Param::DraftFc);
    }
    for l in 0..arch.n_layers {
        out.extend([
            Param::AttnNorm(l),
            Param::Q(l),
            Param::K(l),
            Param::V(l),
            Param::O(l),
            Param::MlpNorm(l),
            Param::Up(l),
            Param::Down(l),
        ]);
    }
    out.push(Param::FinalNorm);
    out.push(Param::LmHead);
    out
}

pub fn tensor_id(arch: &ArchMeta, param: Param) -> TensorId {
    let lead = if arch.kind == ModelKind::Draft { 2 } else { 1 };
    let idx = match param {
        Param::Embed => 0,
        Param::DraftFc => {
            assert_eq!(arch.kind, ModelKind::Draft, "base models have no draft.fc");
            1
        }
        Param::FinalNorm => lead + PER_LAYER * arch.n_layers,
        Param::LmHead => lead + PER_LAYER * arch.n_layers + 1,
        p => {
            let (l, k) = p.layer_slot().expect("layer param");
            assert!(l < arch.n_layers, "layer {l} out of range");
            lead + PER_LAYER * l + k
        }
    };
    TensorId(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A loaded model: metadata plus memory-resident f32 tensors in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub arch: ArchMeta,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelArtifact {
    /// Builds an artifact from named tensors, checking them against the
    /// manifest. Tensors are reordered into manifest order.
    pub fn from_tensors(arch: ArchMeta, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(tensors.len());
        for t in tensors {
            if t.data.len() != t.numel() {
                return Err(Error::Shape(format!(
                    "tensor {} has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            let name = t.name.clone();
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Shape(format!("duplicate tensor {name}")));
            }
        }
        let params = manifest(&arch);
        let mut ordered = Vec::with_capacity(params.len());
        for p in params {
            let name = p.name();
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            let expected = p.shape(&arch);
            if t.shape != expected {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, expected
                )));
            }
            ordered.push(t);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Shape(format!("unexpected tensor {extra}")));
        }
        let index = ordered.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Ok(Self {
            arch,
            tensors: ordered,
            index,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_artifact(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_artifact(self, path)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id(&self, param: Param) -> TensorId {
        tensor_id(&self.arch, param)
    }

    pub fn param(&self, param: Param) -> &Tensor {
        &self.tensors[self.id(param).0]
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Mutable access for constructing rigged test models.
    pub fn param_mut(&mut self, param: Param) -> &mut Tensor {
        let id = self.id(param);
        &mut self.tensors[id.0]
    }
}

/// The prefill, decode and draft artifacts an engine runs with.
#[derive(Debug, Clone)]
pub struct ResolvedArtifacts {
    pub prefill: Arc<ModelArtifact>,
    /// Same `Arc` as `prefill` when no separate decode artifact is configured.
    pub decode: Arc<ModelArtifact>,
    pub draft: Option<Arc<ModelArtifact>>,
}

impl ResolvedArtifacts {
    pub fn shares_instance(&self) -> bool {
        Arc::ptr_eq(&self.prefill, &self.decode)
    }
}

/// Checks that two artifacts can share one KV cache and vocabulary.
pub fn check_compatible(a: &ArchMeta, b: &ArchMeta, what: &str) -> Result<()> {
    if a.vocab_size != b.vocab_size || a.hidden_dim != b.hidden_dim {
        return Err(Error::ArchMismatch(format!(
            "{what}: vocab/hidden {}/{} vs {}/{}",
            a.vocab_size, a.hidden_dim, b.vocab_size, b.hidden_dim
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_ids_match_positions() {
        for arch in [ArchMeta::reference_base(), ArchMeta::reference_draft()] {
            for (i, p) in manifest(&arch).into_iter().enumerate() {
                assert_eq!(tensor_id(&arch, p), TensorId(i), "{p:?}");
            }
        }
    }

    #[test]
    fn reference_arch_is_valid() {
        ArchMeta::reference_base().validate().unwrap();
        ArchMeta::reference_draft().validate().unwrap();
    }

    #[test]
    fn odd_head_dim_rejected() {
        let arch = ArchMeta {
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 3,
            hidden_dim: 6,
            ..ArchMeta::reference_base()
        };
        assert!(matches!(arch.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_tensor_is_named() {
        let arch = ArchMeta::reference_base();
        let full = generate_artifact(&arch, 1);
        let missing = Param::Q(3).name();
        let tensors: Vec<Tensor> = full.tensors().iter().filter(|t| t.name != missing).cloned().collect();
        match ModelArtifact::from_tensors(arch, tensors) {
            Err(Error::Shape(msg)) => assert!(msg.contains(&missing), "{msg}"),
            other => panic!("expected ShapeError, got {other:?}"),
        }
    }
}
