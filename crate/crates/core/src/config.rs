//! Engine configuration document and artifact resolution.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::artifact::{check_compatible, ModelArtifact, ModelKind, ResolvedArtifacts};
use crate::error::{Error, Result};
use crate::kv::Compression;

/// Request id of the slot synthesized when the config lists none.
pub const DEFAULT_SLOT_ID: &str = "default";
pub const DEFAULT_MAX_NEW_TOKENS: usize = 128;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "SamplingConfig::default_top_k")]
    pub top_k: u32,
    #[serde(default = "SamplingConfig::default_top_p")]
    pub top_p: f64,
}

impl SamplingConfig {
    fn default_top_k() -> u32 {
        1
    }

    fn default_top_p() -> f64 {
        1.0
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0 && self.top_k == 1 && self.top_p == 1.0
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_k: 1,
            top_p: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Draft block length `m`.
    #[serde(default = "SpecConfig::default_block_len")]
    pub block_len: usize,
}

impl SpecConfig {
    fn default_block_len() -> usize {
        4
    }
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            block_len: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvConfig {
    #[serde(default = "KvConfig::default_max_slots")]
    pub max_slots: usize,
    /// Longest prompt + generation a slot can hold.
    #[serde(default = "KvConfig::default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub compression: Compression,
}

impl KvConfig {
    fn default_max_slots() -> usize {
        8
    }

    fn default_max_seq_len() -> usize {
        2048
    }
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            max_slots: Self::default_max_slots(),
            max_seq_len: Self::default_max_seq_len(),
            compression: Compression::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotConfig {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prefix_tokens: Vec<u32>,
    /// Little-endian u32 token ids, used instead of `prefix_tokens`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_file: Option<PathBuf>,
    #[serde(default = "SlotConfig::default_max_new")]
    pub max_new_tokens: usize,
}

impl SlotConfig {
    fn default_max_new() -> usize {
        DEFAULT_MAX_NEW_TOKENS
    }

    pub fn new(request_id: impl Into<String>, prefix_tokens: Vec<u32>, max_new_tokens: usize) -> Self {
        Self {
            request_id: request_id.into(),
            prefix_tokens,
            prefix_file: None,
            max_new_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub prefill_artifact_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_artifact_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_artifact_path: Option<PathBuf>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub kv: KvConfig,
    #[serde(default)]
    pub slots: Vec<SlotConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispatch_table_path: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub capture_decode_plan: bool,
    #[serde(default)]
    pub speculative: SpecConfig,
    #[serde(default)]
    pub seed: u64,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A slot with its prefix tokens materialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub request_id: String,
    pub prefix: Vec<u32>,
    pub max_new_tokens: usize,
}

impl EngineConfig {
    /// Config with every default and only the prefill artifact set.
    pub fn minimal(prefill_artifact_path: impl Into<PathBuf>) -> Self {
        Self {
            prefill_artifact_path: prefill_artifact_path.into(),
            decode_artifact_path: None,
            draft_artifact_path: None,
            sampling: SamplingConfig::default(),
            kv: KvConfig::default(),
            slots: Vec::new(),
            dispatch_table_path: None,
            capture_decode_plan: true,
            speculative: SpecConfig::default(),
            seed: 0,
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: EngineConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sampling;
        if !(s.temperature >= 0.0) || s.top_k == 0 || !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return Err(Error::Validation(format!("malformed sampling settings {s:?}")));
        }
        if !s.is_greedy() {
            return Err(Error::Validation(format!(
                "only greedy decoding (temperature=0, top_k=1, top_p=1) is supported, got {s:?}"
            )));
        }
        if self.kv.max_slots == 0 || self.kv.max_seq_len == 0 {
            return Err(Error::Validation(
                "kv.max_slots and kv.max_seq_len must be positive".into(),
            ));
        }
        let m = self.speculative.block_len;
        if m < 1 {
            return Err(Error::Validation("speculative.block_len must be >= 1".into()));
        }
        if m >= self.kv.max_seq_len {
            return Err(Error::Validation(format!(
                "speculative.block_len {m} exceeds kv headroom (max_seq_len {})",
                self.kv.max_seq_len
            )));
        }
        let mut seen = HashSet::new();
        for slot in &self.slots {
            if !seen.insert(slot.request_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate slot request_id {:?}",
                    slot.request_id
                )));
            }
            if slot.max_new_tokens == 0 {
                return Err(Error::Validation(format!(
                    "slot {:?}: max_new_tokens must be positive",
                    slot.request_id
                )));
            }
            if slot.prefix_file.is_some() && !slot.prefix_tokens.is_empty() {
                return Err(Error::Validation(format!(
                    "slot {:?}: give prefix_tokens or prefix_file, not both",
                    slot.request_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Configured slots with prefixes loaded; a single empty-prefix
    /// [`DEFAULT_SLOT_ID`] slot when none are configured.
    pub fn slot_specs(&self) -> Result<Vec<SlotSpec>> {
        if self.slots.is_empty() {
            return Ok(vec![SlotSpec {
                request_id: DEFAULT_SLOT_ID.into(),
                prefix: Vec::new(),
                max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            }]);
        }
        self.slots
            .iter()
            .map(|s| {
                let prefix = match &s.prefix_file {
                    Some(p) => read_token_file(self.resolve_path(p))?,
                    None => s.prefix_tokens.clone(),
                };
                Ok(SlotSpec {
                    request_id: s.request_id.clone(),
                    prefix,
                    max_new_tokens: s.max_new_tokens,
                })
            })
            .collect()
    }
}

pub fn load_engine_config(path: impl AsRef<Path>) -> Result<EngineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    EngineConfig::from_json_str(&text, dir)
}

/// Reads a file of little-endian u32 token ids.
pub fn read_token_file(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: token file length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_token_file(path: impl AsRef<Path>, tokens: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads the prefill artifact and, when configured, the decode and draft
/// artifacts. Without a decode artifact both phases share one instance.
pub fn resolve_artifacts(cfg: &EngineConfig) -> Result<ResolvedArtifacts> {
    let prefill = Arc::new(ModelArtifact::load(cfg.resolve_path(&cfg.prefill_artifact_path))?);
    if prefill.arch.kind != ModelKind::Base {
        return Err(Error::ArchMismatch("prefill artifact is not a base model".into()));
    }
    let decode = match &cfg.decode_artifact_path {
        None => Arc::clone(&prefill),
        Some(p) => {
            let d = ModelArtifact::load(cfg.resolve_path(p))?;
            check_compatible(&prefill.arch, &d.arch, "prefill vs decode artifact")?;
            if d.arch.kind != ModelKind::Base || d.arch.kv_shape() != prefill.arch.kv_shape() {
                return Err(Error::ArchMismatch(format!(
                    "decode artifact KV geometry {:?} differs from prefill {:?}",
                    d.arch.kv_shape(),
                    prefill.arch.kv_shape()
                )));
            }
            Arc::new(d)
        }
    };
    let draft = if cfg.speculative.enabled {
        let p = cfg.draft_artifact_path.as_ref().ok_or_else(|| {
            Error::Validation("speculative decoding enabled but draft_artifact_path is absent".into())
        })?;
        let d = ModelArtifact::load(cfg.resolve_path(p))?;
        check_draft(&decode.arch, &d.arch)?;
        Some(Arc::new(d))
    } else {
        None
    };
    Ok(ResolvedArtifacts { prefill, decode, draft })
}

pub(crate) fn check_draft(base: &crate::artifact::ArchMeta, draft: &crate::artifact::ArchMeta) -> Result<()> {
    if draft.kind != ModelKind::Draft {
        return Err(Error::ArchMismatch("draft artifact is not a draft model".into()));
    }
    check_compatible(base, draft, "base vs draft artifact")?;
    if base.feature_tap_layers != draft.feature_tap_layers {
        return Err(Error::ArchMismatch(format!(
            "draft consumes tap layers {:?} but base exports {:?}",
            draft.feature_tap_layers, base.feature_tap_layers
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = EngineConfig::from_json_str(r#"{"prefill_artifact_path": "m.efmt"}"#, "/x").unwrap();
        assert!(cfg.capture_decode_plan);
        assert!(!cfg.speculative.enabled);
        assert_eq!(cfg.speculative.block_len, 4);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.decode_artifact_path.is_none());
        assert_eq!(cfg.resolve_path(&cfg.prefill_artifact_path), PathBuf::from("/x/m.efmt"));
    }

    #[test]
    fn non_greedy_rejected() {
        let r = EngineConfig::from_json_str(
            r#"{"prefill_artifact_path": "m", "sampling": {"temperature": 0.7}}"#,
            "",
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_slot_rejected() {
        let r = EngineConfig::from_json_str(
            r#"{"prefill_artifact_path": "m", "slots": [{"request_id": "a"}, {"request_id": "a"}]}"#,
            "",
        );
        match r {
            Err(Error::Validation(msg)) => assert!(msg.contains("duplicate")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_json() {
        for text in [
            r#"{"prefill_artifact_path": "m", "batch_size": 4}"#,
            r#"{"prefill_artifact_path": "m", "kv": {"max_slots": 1, "paged": true}}"#,
            r#"{"prefill_artifact_path": "#,
        ] {
            assert!(
                matches!(EngineConfig::from_json_str(text, ""), Err(Error::Parse(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn zero_block_len_rejected() {
        let r = EngineConfig::from_json_str(
            r#"{"prefill_artifact_path": "m", "speculative": {"enabled": true, "block_len": 0}}"#,
            "",
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_token_file(&p, &[1, 70000, 3]).unwrap();
        assert_eq!(read_token_file(&p).unwrap(), vec![1, 70000, 3]);
        std::fs::write(&p, [1u8, 2, 3]).unwrap();
        assert!(matches!(read_token_file(&p), Err(Error::Format(_))));
    }
}
