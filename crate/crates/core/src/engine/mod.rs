//! Single-request execution pipeline: acquire, prefill, decode, release.

mod decode;
mod stats;

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use decode::{decode_loop_plain, decode_loop_speculative, Drafter, LoopOutput, ModelDrafter, StopRule};
pub use stats::{RequestStats, SpecStats, Timers};

use crate::alloc::AllocCounter;
use crate::artifact::{check_compatible, ResolvedArtifacts};
use crate::config::{check_draft, load_engine_config, resolve_artifacts, EngineConfig};
use crate::dispatch::{DispatchKey, DispatchTable};
use crate::error::{Error, Result};
use crate::kernels::{KernelRegistry, StepPlan};
use crate::kv::KvManager;
use crate::model::forward::ModelRunner;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub request_id: String,
    /// The user suffix; the slot's prefix is prepended implicitly.
    pub input_tokens: Vec<u32>,
    pub max_new_tokens: Option<usize>,
    pub stop_token: Option<u32>,
}

impl InferenceRequest {
    pub fn new(request_id: impl Into<String>, input_tokens: Vec<u32>) -> Self {
        Self {
            request_id: request_id.into(),
            input_tokens,
            max_new_tokens: None,
            stop_token: None,
        }
    }

    pub fn max_new(mut self, n: usize) -> Self {
        self.max_new_tokens = Some(n);
        self
    }

    pub fn stop_at(mut self, token: u32) -> Self {
        self.stop_token = Some(token);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub output_tokens: Vec<u32>,
    pub stats: RequestStats,
}

/// A prefilled request awaiting decode.
#[derive(Debug)]
struct Session {
    request_id: String,
    /// Prefix plus every input token.
    context: Vec<u32>,
    logits: Vec<f32>,
    features: Vec<f32>,
    prefill_ms: f64,
}

#[derive(Debug)]
struct Runtime {
    kv: KvManager,
    prefill: ModelRunner,
    decode: ModelRunner,
    plan: Option<StepPlan>,
    drafter: Option<ModelDrafter>,
    session: Option<Session>,
}

/// How the decode phase of one request runs.
enum DecodeMode<'a> {
    Configured,
    Speculative { drafter: &'a mut dyn Drafter, m: usize },
}

/// The inference engine. Serves one request at a time.
pub struct Engine {
    config: EngineConfig,
    artifacts: ResolvedArtifacts,
    registry: Arc<KernelRegistry>,
    table: Arc<DispatchTable>,
    alloc: AllocCounter,
    runtime: Mutex<Runtime>,
    /// Request currently inside an engine call.
    busy: Mutex<Option<String>>,
    closed: AtomicBool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("closed", &self.closed.load(Ordering::Relaxed))
            .finish_non_exhaustive()
    }
}

/// Clears the busy flag when an engine call returns.
struct CallGuard<'a> {
    engine: &'a Engine,
    rt: MutexGuard<'a, Runtime>,
}

impl Drop for CallGuard<'_> {
    fn drop(&mut self) {
        *self.engine.busy.lock().unwrap_or_else(|e| e.into_inner()) = None;
    }
}

impl Engine {
    /// Loads the config at `path` and builds an engine from it.
    pub fn create(path: impl AsRef<Path>) -> Result<Engine> {
        Engine::new(load_engine_config(path)?)
    }

    pub fn new(config: EngineConfig) -> Result<Engine> {
        let artifacts = resolve_artifacts(&config)?;
        Engine::from_parts(config, artifacts, KernelRegistry::builtin())
    }

    /// Builds an engine from already loaded artifacts and a registry:
    /// builds and freezes the dispatch table, allocates and warms every
    /// slot, and captures step plans when configured.
    pub fn from_parts(config: EngineConfig, artifacts: ResolvedArtifacts, registry: KernelRegistry) -> Result<Engine> {
        config.validate()?;
        if config.speculative.enabled && artifacts.draft.is_none() {
            return Err(Error::Validation(
                "speculative decoding enabled without a draft artifact".into(),
            ));
        }
        check_compatible(
            &artifacts.prefill.arch,
            &artifacts.decode.arch,
            "prefill vs decode artifact",
        )?;
        if let Some(d) = &artifacts.draft {
            check_draft(&artifacts.decode.arch, &d.arch)?;
        }
        let registry = Arc::new(registry);
        let mut archs = vec![&artifacts.prefill.arch, &artifacts.decode.arch];
        if let Some(d) = &artifacts.draft {
            archs.push(&d.arch);
        }
        let mut table = DispatchTable::with_defaults(registry.clone(), &archs)?;
        if let Some(p) = &config.dispatch_table_path {
            table.load_overrides(config.resolve_path(p))?;
        }
        let table = Arc::new(table);

        let alloc = AllocCounter::new();
        let m = if config.speculative.enabled {
            config.speculative.block_len
        } else {
            0
        };
        let specs = config.slot_specs()?;
        let draft = if config.speculative.enabled {
            artifacts.draft.clone()
        } else {
            None
        };
        let mut kv = KvManager::init_slots(
            &config.kv,
            &specs,
            artifacts.prefill.arch.kv_shape(),
            draft.as_ref().map(|d| d.arch.kv_shape()),
            m,
            &alloc,
        )?;
        let capacity = config.kv.max_seq_len + m;
        let mut prefill = ModelRunner::new(artifacts.prefill.clone(), config.kv.max_seq_len, capacity, &alloc);
        kv.warmup(&artifacts.prefill, &table, prefill.arena_mut())?;
        let decode = ModelRunner::new(artifacts.decode.clone(), m + 1, capacity, &alloc);
        let mut drafter = draft.map(|d| ModelDrafter::new(d, capacity, &alloc));

        let mut plan = None;
        if config.capture_decode_plan {
            let id = specs[0].request_id.clone();
            let slot = kv.acquire(&id)?;
            let k = slot.prefix_len();
            let (base, draft_kv) = slot.stores_mut();
            plan = Some(StepPlan::capture(
                artifacts.decode.clone(),
                0,
                base,
                &table,
                None,
                &alloc,
            )?);
            if let (Some(d), Some(dkv)) = (drafter.as_mut(), draft_kv) {
                d.capture(dkv, &table, &alloc)?;
                dkv.set_len(0);
            }
            slot.truncate(k)?;
            kv.release_with(&id, false)?;
        }

        Ok(Engine {
            runtime: Mutex::new(Runtime {
                kv,
                prefill,
                decode,
                plan,
                drafter,
                session: None,
            }),
            config,
            artifacts,
            registry,
            table,
            alloc,
            busy: Mutex::new(None),
            closed: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn artifacts(&self) -> &ResolvedArtifacts {
        &self.artifacts
    }

    pub fn table(&self) -> &Arc<DispatchTable> {
        &self.table
    }

    pub fn registry(&self) -> &Arc<KernelRegistry> {
        &self.registry
    }

    /// Counter of runtime buffer allocations.
    pub fn alloc_counter(&self) -> &AllocCounter {
        &self.alloc
    }

    pub fn has_plan(&self) -> bool {
        self.lock_runtime().plan.is_some()
    }

    /// Number of recorded calls in the decode plan.
    pub fn plan_len(&self) -> Option<usize> {
        self.lock_runtime().plan.as_ref().map(StepPlan::len)
    }

    /// Read access to the KV manager between requests.
    pub fn with_kv<R>(&self, f: impl FnOnce(&KvManager) -> R) -> R {
        f(&self.lock_runtime().kv)
    }

    fn lock_runtime(&self) -> MutexGuard<'_, Runtime> {
        self.runtime.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn enter(&self, request_id: &str) -> Result<CallGuard<'_>> {
        if self.closed.load(Ordering::Acquire) {
            return Err(Error::Closed);
        }
        {
            let mut busy = self.busy.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(cur) = busy.as_ref() {
                return Err(if cur == request_id {
                    Error::SlotBusy(cur.clone())
                } else {
                    Error::EngineBusy(cur.clone())
                });
            }
            *busy = Some(request_id.to_owned());
        }
        let guard = CallGuard {
            engine: self,
            rt: self.lock_runtime(),
        };
        if let Some(s) = &guard.rt.session {
            if s.request_id != request_id {
                return Err(Error::EngineBusy(s.request_id.clone()));
            }
        }
        Ok(guard)
    }

    /// Runs one request end to end.
    pub fn execute(&self, req: &InferenceRequest) -> Result<InferenceResponse> {
        let mut g = self.enter(&req.request_id)?;
        self.run_request(&mut g.rt, req, DecodeMode::Configured)
    }

    /// Runs one request with speculative decoding driven by `drafter`
    /// (block length `m`), regardless of the configured mode.
    pub fn execute_with_drafter(
        &self,
        req: &InferenceRequest,
        drafter: &mut dyn Drafter,
        m: usize,
    ) -> Result<InferenceResponse> {
        if m == 0 || m > self.kv_headroom() {
            return Err(Error::Capacity(format!(
                "block length {m} outside 1..={} (slot headroom)",
                self.kv_headroom()
            )));
        }
        let mut g = self.enter(&req.request_id)?;
        self.run_request(&mut g.rt, req, DecodeMode::Speculative { drafter, m })
    }

    fn kv_headroom(&self) -> usize {
        if self.config.speculative.enabled {
            self.config.speculative.block_len
        } else {
            0
        }
    }

    /// Acquires the request's slot and prefills `tokens`, leaving the
    /// request open for [`Engine::generate`].
    pub fn prefill(&self, request_id: &str, tokens: &[u32]) -> Result<RequestStats> {
        let mut g = self.enter(request_id)?;
        let rt = &mut *g.rt;
        let start = Instant::now();
        let res = self.prefill_into_session(rt, request_id, tokens, start);
        if res.is_err() {
            self.abort(rt, request_id);
        }
        res?;
        let s = rt.session.as_ref().expect("session just opened");
        let t = s.prefill_ms;
        Ok(RequestStats {
            prefill_ms: t,
            decode_ms: 0.0,
            total_ms: t,
            prompt_tokens: s.context.len(),
            new_tokens: 0,
            per_step_ms: Vec::new(),
            speculative: None,
        })
    }

    /// Decodes up to `max_new` tokens. Continues a request opened by
    /// [`Engine::prefill`] (prefilling `tokens` first, if any), otherwise
    /// runs the whole pipeline. The slot is released afterwards.
    pub fn generate(&self, request_id: &str, tokens: &[u32], max_new: Option<usize>) -> Result<InferenceResponse> {
        let req = InferenceRequest {
            request_id: request_id.to_owned(),
            input_tokens: tokens.to_vec(),
            max_new_tokens: max_new,
            stop_token: None,
        };
        self.execute(&req)
    }

    /// Ends an open request and returns its slot. No-op if none is open.
    pub fn release(&self, request_id: &str) -> Result<()> {
        let mut g = self.enter(request_id)?;
        let rt = &mut *g.rt;
        rt.kv.index_of(request_id)?;
        if rt.session.as_ref().is_some_and(|s| s.request_id == request_id) {
            rt.session = None;
            rt.kv.release(request_id)?;
        }
        Ok(())
    }

    /// Closes the engine; later calls fail with a closed-handle error.
    pub fn shutdown(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        let mut rt = self.lock_runtime();
        if let Some(s) = rt.session.take() {
            let _ = rt.kv.release(&s.request_id);
        }
    }

    /// Runs `req` with dispatch probing on and returns every concrete
    /// context resolved along the way. Replayed plan steps do not resolve,
    /// so decode contexts only show up on an engine without a plan.
    pub fn probe_contexts(&self, req: &InferenceRequest) -> Result<Vec<DispatchKey>> {
        self.table.clear_probe_log();
        self.table.set_probing(true);
        let res = self.execute(req);
        self.table.set_probing(false);
        res?;
        Ok(self.table.probe_log().into_keys().collect())
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    fn abort(&self, rt: &mut Runtime, request_id: &str) {
        rt.session = None;
        let _ = rt.kv.release(request_id);
    }

    /// Acquires (unless a session is already open) and prefills.
    fn prefill_into_session(&self, rt: &mut Runtime, request_id: &str, tokens: &[u32], start: Instant) -> Result<()> {
        let max_seq = self.config.kv.max_seq_len;
        if let Some(s) = rt.session.as_mut() {
            if !tokens.is_empty() {
                let slot = rt.kv.slot_mut(request_id)?;
                if slot.current_len() + tokens.len() > max_seq {
                    return Err(Error::Capacity(format!(
                        "{} cached + {} new tokens exceed max_seq_len {max_seq}",
                        slot.current_len(),
                        tokens.len()
                    )));
                }
                rt.prefill.prefill(tokens, slot.base_mut(), &self.table)?;
                s.logits.copy_from_slice(rt.prefill.logits(0));
                s.features.copy_from_slice(rt.prefill.features(tokens.len() - 1));
                s.context.extend_from_slice(tokens);
            }
            s.prefill_ms += stats::ms(start.elapsed());
            return Ok(());
        }
        let slot = rt.kv.acquire(request_id)?;
        let k = slot.prefix_len();
        if k + tokens.len() > max_seq {
            return Err(Error::Capacity(format!(
                "prefix {k} + input {} exceed max_seq_len {max_seq}",
                tokens.len()
            )));
        }
        let mut context = Vec::with_capacity(k + tokens.len());
        context.extend_from_slice(slot.prefix());
        context.extend_from_slice(tokens);
        let (logits, features) = if tokens.is_empty() {
            let (l, f) = slot.prefix_output().ok_or_else(|| {
                Error::Validation(format!("request {request_id:?}: empty prompt on a slot without prefix"))
            })?;
            (l.to_vec(), f.to_vec())
        } else {
            rt.prefill.prefill(tokens, slot.base_mut(), &self.table)?;
            (
                rt.prefill.logits(0).to_vec(),
                rt.prefill.features(tokens.len() - 1).to_vec(),
            )
        };
        rt.session = Some(Session {
            request_id: request_id.to_owned(),
            context,
            logits,
            features,
            prefill_ms: stats::ms(start.elapsed()),
        });
        Ok(())
    }

    fn run_request(&self, rt: &mut Runtime, req: &InferenceRequest, mode: DecodeMode<'_>) -> Result<InferenceResponse> {
        let res = self.run_request_inner(rt, req, mode);
        if res.is_err() {
            self.abort(rt, &req.request_id);
        }
        res
    }

    fn run_request_inner(
        &self,
        rt: &mut Runtime,
        req: &InferenceRequest,
        mode: DecodeMode<'_>,
    ) -> Result<InferenceResponse> {
        let start = Instant::now();
        let id = req.request_id.as_str();
        let (slot_max, k) = {
            let s = rt.kv.slot(id)?;
            (s.max_new_tokens(), s.prefix_len())
        };
        let max_new = req.max_new_tokens.unwrap_or(slot_max);
        if max_new > slot_max {
            return Err(Error::Capacity(format!(
                "request asks for {max_new} new tokens, slot {id:?} allows {slot_max}"
            )));
        }
        let max_seq = self.config.kv.max_seq_len;
        let cached = match &rt.session {
            Some(s) => s.context.len(),
            None => k,
        };
        if cached + req.input_tokens.len() + max_new > max_seq {
            return Err(Error::Capacity(format!(
                "{cached} cached + {} input + {max_new} new tokens exceed max_seq_len {max_seq}",
                req.input_tokens.len()
            )));
        }
        let earlier_prefill_ms = rt.session.as_ref().map_or(0.0, |s| s.prefill_ms);
        self.prefill_into_session(rt, id, &req.input_tokens, start)?;
        let prefill_end = Instant::now();
        let session = rt.session.take().expect("prefill opened a session");
        let rule = StopRule {
            max_new,
            stop_token: req.stop_token,
        };

        let slot = rt.kv.slot_mut(id)?;
        let (base, draft_kv) = slot.stores_mut();
        let out = if max_new == 0 {
            LoopOutput::default()
        } else {
            let spec = match mode {
                DecodeMode::Speculative { drafter, m } => Some((drafter, m)),
                DecodeMode::Configured => rt
                    .drafter
                    .as_mut()
                    .map(|d| (d as &mut dyn Drafter, self.config.speculative.block_len)),
            };
            match spec {
                Some((drafter, m)) => decode_loop_speculative(
                    &mut rt.decode,
                    base,
                    draft_kv,
                    &self.table,
                    drafter,
                    &session.context,
                    &session.logits,
                    &session.features,
                    m,
                    rule,
                )?,
                None => decode_loop_plain(
                    &mut rt.decode,
                    rt.plan.as_mut(),
                    base,
                    &self.table,
                    &session.logits,
                    rule,
                )?,
            }
        };
        let decode_end = if max_new == 0 { prefill_end } else { Instant::now() };
        let mut stats = RequestStats::collect(
            Timers {
                start,
                prefill_end,
                decode_end,
            },
            session.context.len(),
            out.tokens.len(),
            out.per_step_ms,
            out.speculative,
        );
        if earlier_prefill_ms > 0.0 {
            // the request was opened by an earlier prefill call
            stats.prefill_ms += earlier_prefill_ms;
            stats.total_ms += earlier_prefill_ms;
        }
        rt.kv.release(id)?;
        Ok(InferenceResponse {
            output_tokens: out.tokens,
            stats,
        })
    }
}

/// Convenience wrapper mirroring the scripting API.
pub fn create_engine(config_path: impl AsRef<Path>) -> Result<Engine> {
    Engine::create(config_path)
}
