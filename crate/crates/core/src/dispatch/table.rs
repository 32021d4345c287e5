use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::key::{parse_shape_sig, DispatchKey, OpKind, Stage, HW_PROFILE_CPU_REF};
use crate::artifact::ArchMeta;
use crate::error::{Error, Result};
use crate::kernels::{KernelFn, KernelRegistry, ParamMap};

/// One row of the operator implementation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchEntry {
    pub key: DispatchKey,
    pub impl_id: String,
    pub impl_params: ParamMap,
}

impl DispatchEntry {
    pub fn new(key: DispatchKey, impl_id: impl Into<String>) -> Self {
        Self {
            key,
            impl_id: impl_id.into(),
            impl_params: ParamMap::new(),
        }
    }

    pub fn with_params(mut self, params: ParamMap) -> Self {
        self.impl_params = params;
        self
    }
}

/// On-disk override record: exactly the seven key fields plus impl_id and
/// impl_params, all required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideRecord {
    model_name: String,
    hw_profile: String,
    op_kind: String,
    layer_role: String,
    op_name: String,
    stage: String,
    shape_sig: String,
    impl_id: String,
    impl_params: ParamMap,
}

impl From<OverrideRecord> for DispatchEntry {
    fn from(r: OverrideRecord) -> Self {
        DispatchEntry {
            key: DispatchKey {
                model_name: r.model_name,
                hw_profile: r.hw_profile,
                op_kind: r.op_kind,
                layer_role: r.layer_role,
                op_name: r.op_name,
                stage: r.stage,
                shape_sig: r.shape_sig,
            },
            impl_id: r.impl_id,
            impl_params: r.impl_params,
        }
    }
}

impl From<&DispatchEntry> for OverrideRecord {
    fn from(e: &DispatchEntry) -> Self {
        let k = e.key.clone();
        OverrideRecord {
            model_name: k.model_name,
            hw_profile: k.hw_profile,
            op_kind: k.op_kind,
            layer_role: k.layer_role,
            op_name: k.op_name,
            stage: k.stage,
            shape_sig: k.shape_sig,
            impl_id: e.impl_id.clone(),
            impl_params: e.impl_params.clone(),
        }
    }
}

/// Where an entry came from. Among otherwise tied entries an override wins
/// over a built-in default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryOrigin {
    Builtin,
    Override,
}

#[derive(Debug, Clone)]
pub struct TableEntry {
    pub entry: DispatchEntry,
    pub origin: EntryOrigin,
}

/// A resolved context: the winning entry plus its kernel entry point.
#[derive(Debug, Clone)]
pub struct Resolution {
    pub entry: DispatchEntry,
    pub origin: EntryOrigin,
    pub kernel: KernelFn,
    pub capturable: bool,
}

/// Total order on matching entries; `Greater` means `a` is preferred.
///
/// Specificity first, then the non-wildcard pattern compared field by field
/// in priority order, then origin, then the smaller impl_id.
pub fn compare_entries(a: &TableEntry, b: &TableEntry) -> CmpOrdering {
    let ka = &a.entry.key;
    let kb = &b.entry.key;
    ka.specificity()
        .cmp(&kb.specificity())
        .then_with(|| {
            let pa = ka.fields_by_priority().map(|f| !f.is_empty());
            let pb = kb.fields_by_priority().map(|f| !f.is_empty());
            pa.cmp(&pb)
        })
        .then_with(|| a.origin.cmp(&b.origin))
        .then_with(|| b.entry.impl_id.cmp(&a.entry.impl_id))
}

/// The operator implementation table.
///
/// Mutable while an engine is being built; shared read-only through `Arc`
/// afterwards. Resolutions are memoized per concrete context.
pub struct DispatchTable {
    registry: Arc<KernelRegistry>,
    entries: Vec<TableEntry>,
    cache: RwLock<HashMap<DispatchKey, Arc<Resolution>>>,
    resolutions: AtomicU64,
    override_hits: AtomicU64,
    probing: AtomicBool,
    probe: Mutex<BTreeMap<DispatchKey, String>>,
}

impl std::fmt::Debug for DispatchTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DispatchTable")
            .field("entries", &self.entries.len())
            .field("resolutions", &self.resolution_count())
            .finish_non_exhaustive()
    }
}

impl DispatchTable {
    /// A table with no entries.
    pub fn new(registry: Arc<KernelRegistry>) -> Self {
        Self {
            registry,
            entries: Vec::new(),
            cache: RwLock::new(HashMap::new()),
            resolutions: AtomicU64::new(0),
            override_hits: AtomicU64::new(0),
            probing: AtomicBool::new(false),
            probe: Mutex::new(BTreeMap::new()),
        }
    }

    /// A table holding the built-in defaults for every op kind, plus a
    /// per-model GELU entry matching each architecture's declared variant.
    pub fn with_defaults(registry: Arc<KernelRegistry>, models: &[&ArchMeta]) -> Result<Self> {
        let mut t = Self::new(registry);
        for e in builtin_defaults(models) {
            t.add_entry(e, EntryOrigin::Builtin)?;
        }
        Ok(t)
    }

    pub fn registry(&self) -> &Arc<KernelRegistry> {
        &self.registry
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    /// Validates and appends one entry.
    pub fn add_entry(&mut self, entry: DispatchEntry, origin: EntryOrigin) -> Result<()> {
        self.check_entry(&entry)?;
        self.entries.push(TableEntry { entry, origin });
        self.cache.get_mut().expect("cache lock").clear();
        Ok(())
    }

    fn check_entry(&self, e: &DispatchEntry) -> Result<()> {
        let k = self
            .registry
            .get(&e.impl_id)
            .ok_or_else(|| Error::UnknownImpl(e.impl_id.clone()))?;
        if !e.key.op_kind.is_empty() {
            let kind = OpKind::parse(&e.key.op_kind)
                .ok_or_else(|| Error::Validation(format!("unknown op_kind {:?}", e.key.op_kind)))?;
            if kind != k.op_kind {
                return Err(Error::Validation(format!(
                    "impl {} is a {} kernel, entry names op_kind {kind}",
                    e.impl_id, k.op_kind
                )));
            }
        }
        if !e.key.stage.is_empty() && Stage::parse(&e.key.stage).is_none() {
            return Err(Error::Validation(format!(
                "stage must be prefill, decode or empty, got {:?}",
                e.key.stage
            )));
        }
        if !e.key.shape_sig.is_empty() {
            parse_shape_sig(&e.key.shape_sig, Some(k.op_kind))?;
        }
        k.validate_params(&e.impl_params)
    }

    /// Parses an override document without touching the table.
    pub fn parse_overrides(text: &str) -> Result<Vec<DispatchEntry>> {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        let recs: Vec<OverrideRecord> =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("dispatch overrides: {e}")))?;
        Ok(recs.into_iter().map(DispatchEntry::from).collect())
    }

    /// Appends the entries of an override file. Nothing is appended if any
    /// entry is invalid.
    pub fn load_overrides(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_overrides_str(&text)
    }

    pub fn load_overrides_str(&mut self, text: &str) -> Result<usize> {
        let entries = Self::parse_overrides(text)?;
        for e in &entries {
            self.check_entry(e)?;
        }
        let n = entries.len();
        for e in entries {
            self.add_entry(e, EntryOrigin::Override)?;
        }
        Ok(n)
    }

    /// The best entry for a concrete context, without caching or counting.
    pub fn lookup(&self, ctx: &DispatchKey) -> Option<&TableEntry> {
        let kind = OpKind::parse(&ctx.op_kind)?;
        let stage = Stage::parse(&ctx.stage)?;
        self.entries
            .iter()
            .filter(|te| te.entry.key.matches(ctx))
            .filter(|te| {
                self.registry
                    .get(&te.entry.impl_id)
                    .is_some_and(|k| k.op_kind == kind && k.supports(stage))
            })
            .max_by(|a, b| compare_entries(a, b))
    }

    /// Resolves a fully concrete context.
    pub fn resolve(&self, ctx: &DispatchKey) -> Result<Arc<Resolution>> {
        self.resolutions.fetch_add(1, Ordering::Relaxed);
        let res = self.resolve_cached(ctx)?;
        if res.origin == EntryOrigin::Override {
            self.override_hits.fetch_add(1, Ordering::Relaxed);
        }
        if self.probing.load(Ordering::Relaxed) {
            self.probe
                .lock()
                .expect("probe lock")
                .insert(ctx.clone(), res.entry.impl_id.clone());
        }
        Ok(res)
    }

    fn resolve_cached(&self, ctx: &DispatchKey) -> Result<Arc<Resolution>> {
        if let Some(r) = self.cache.read().expect("cache lock").get(ctx) {
            return Ok(r.clone());
        }
        if !ctx.is_concrete() {
            return Err(Error::Validation(format!(
                "resolve needs a concrete context, got {ctx}"
            )));
        }
        let te = self
            .lookup(ctx)
            .ok_or_else(|| Error::NoKernel(format!("no entry matches {ctx}")))?;
        let k = self
            .registry
            .get(&te.entry.impl_id)
            .ok_or_else(|| Error::NoKernel(te.entry.impl_id.clone()))?;
        let res = Arc::new(Resolution {
            entry: te.entry.clone(),
            origin: te.origin,
            kernel: k.run,
            capturable: k.capturable,
        });
        self.cache.write().expect("cache lock").insert(ctx.clone(), res.clone());
        Ok(res)
    }

    /// Number of `resolve` calls so far, cache hits included.
    pub fn resolution_count(&self) -> u64 {
        self.resolutions.load(Ordering::Relaxed)
    }

    /// Number of resolutions won by an override entry.
    pub fn override_hits(&self) -> u64 {
        self.override_hits.load(Ordering::Relaxed)
    }

    /// Starts recording every resolved context.
    pub fn set_probing(&self, on: bool) {
        self.probing.store(on, Ordering::Relaxed);
    }

    /// Contexts resolved while probing, with the impl each resolved to.
    pub fn probe_log(&self) -> BTreeMap<DispatchKey, String> {
        self.probe.lock().expect("probe lock").clone()
    }

    pub fn clear_probe_log(&self) {
        self.probe.lock().expect("probe lock").clear();
    }
}

/// The built-in default rows.
pub fn builtin_defaults(models: &[&ArchMeta]) -> Vec<DispatchEntry> {
    let generic = |kind: OpKind, id: &str| DispatchEntry::new(DispatchKey::for_kind(kind), id);
    let mut out = vec![
        generic(OpKind::Linear, "linear.naive"),
        generic(OpKind::Attention, "attention.prefill_masked"),
        DispatchEntry::new(
            DispatchKey::for_kind(OpKind::Attention).with_stage(Stage::Decode),
            "attention.decode_cached",
        ),
        generic(OpKind::Rope, "rope.fused"),
        generic(OpKind::Gelu, "gelu.erf"),
        generic(OpKind::Rmsnorm, "rmsnorm.ref"),
        generic(OpKind::KvUpdate, "kv_update.append"),
        generic(OpKind::Embedding, "embedding.gather"),
        generic(OpKind::Add, "add.elementwise"),
        generic(OpKind::Copy, "copy.rows"),
    ];
    let mut seen = Vec::new();
    for arch in models {
        if seen.contains(&arch.model_name) {
            continue;
        }
        seen.push(arch.model_name.clone());
        out.push(DispatchEntry::new(
            DispatchKey::for_kind(OpKind::Gelu).with_model(&arch.model_name),
            format!("gelu.{}", arch.gelu_variant.as_str()),
        ));
    }
    out
}

/// Serializes entries in the override file format.
pub fn overrides_to_json(entries: &[DispatchEntry]) -> String {
    let recs: Vec<OverrideRecord> = entries.iter().map(OverrideRecord::from).collect();
    serde_json::to_string_pretty(&recs).expect("override records serialize")
}

pub fn write_overrides(path: impl AsRef<Path>, entries: &[DispatchEntry]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, overrides_to_json(entries)).map_err(|e| Error::io(path, e))
}

/// Concrete context for one operator call on the reference backend.
pub fn concrete_key(
    model_name: &str,
    kind: OpKind,
    layer_role: &str,
    op_name: &str,
    stage: Stage,
    shape_sig: String,
) -> DispatchKey {
    DispatchKey {
        model_name: model_name.to_owned(),
        hw_profile: HW_PROFILE_CPU_REF.to_owned(),
        op_kind: kind.as_str().to_owned(),
        layer_role: layer_role.to_owned(),
        op_name: op_name.to_owned(),
        stage: stage.as_str().to_owned(),
        shape_sig,
    }
}
