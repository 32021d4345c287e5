//! Recorded decode steps.
//!
//! A [`StepPlan`] is captured while a real decode step runs: every resolved
//! kernel call is recorded with its fixed buffer bindings and parameters.
//! Replaying writes the token id and position into the plan's input slots
//! and runs the recorded calls, with no table lookups and no allocation.

use std::sync::Arc;

use super::exec::{Arena, ArenaLayout, Buf, ExecEnv, KernelFn, OpArgs, ParamMap};
use crate::alloc::AllocCounter;
use crate::artifact::{ModelArtifact, ModelKind};
use crate::dispatch::DispatchTable;
use crate::dispatch::Stage;
use crate::error::{Error, Result};
use crate::kv::{KvGeometry, KvStore};
use crate::model::forward::{check_geometry, check_tokens, emit_graph, fault_to_error, run_graph, LogitRows};

/// One recorded kernel invocation.
#[derive(Debug, Clone)]
pub struct PlanStep {
    pub impl_id: String,
    pub op_name: String,
    pub kernel: KernelFn,
    pub args: OpArgs,
    pub params: ParamMap,
}

#[derive(Debug)]
pub struct StepPlan {
    artifact: Arc<ModelArtifact>,
    steps: Vec<PlanStep>,
    arena: Arena,
    geometry: KvGeometry,
}

impl StepPlan {
    /// Runs one decode step of `token` at `kv.len()` and records it.
    /// `features` is required for draft models.
    pub fn capture(
        artifact: Arc<ModelArtifact>,
        token: u32,
        kv: &mut KvStore,
        table: &DispatchTable,
        features: Option<&[f32]>,
        alloc: &AllocCounter,
    ) -> Result<StepPlan> {
        let arch = &artifact.arch;
        check_geometry(arch, kv)?;
        check_tokens(arch, &[token])?;
        if kv.len() >= kv.capacity() {
            return Err(Error::Capacity("cannot capture a step into a full slot".into()));
        }
        let mut arena = Arena::new(ArenaLayout::for_arch(arch, 1, kv.capacity()), alloc);
        if arch.kind == ModelKind::Draft {
            let f = features.ok_or_else(|| Error::Validation("draft capture needs base features".into()))?;
            if f.len() != arch.feature_dim() {
                return Err(Error::Shape(format!(
                    "base features have {} values, expected {}",
                    f.len(),
                    arch.feature_dim()
                )));
            }
            arena.buf_mut(Buf::FeatIn).copy_from_slice(f);
        }
        arena.set_tokens(&[token]);
        arena.set_position(kv.len());
        let graph = emit_graph(arch, 1, LogitRows::Last);
        let mut steps = Vec::with_capacity(graph.len());
        {
            let mut env = ExecEnv {
                arena: &mut arena,
                weights: artifact.tensors(),
                kv,
            };
            run_graph(
                &graph,
                &arch.model_name,
                Stage::Decode,
                table,
                &mut env,
                Some(&mut steps),
            )?;
        }
        Ok(StepPlan {
            geometry: kv.geometry(),
            artifact,
            steps,
            arena,
        })
    }

    /// Re-executes the recorded step for `token` at `position`, which must
    /// equal the current cache length. Returns the logits.
    pub fn replay(&mut self, token: u32, position: usize, kv: &mut KvStore) -> Result<&[f32]> {
        if kv.geometry() != self.geometry {
            return Err(Error::GeometryDrift(format!(
                "captured for {:?}, slot now {:?}",
                self.geometry,
                kv.geometry()
            )));
        }
        if position != kv.len() {
            return Err(Error::Range(format!(
                "replay position {position} != cache length {}",
                kv.len()
            )));
        }
        if token as usize >= self.artifact.arch.vocab_size {
            return Err(Error::Range(format!("token id {token} outside vocabulary")));
        }
        self.arena.tokens[0] = token;
        self.arena.position = position;
        let mut env = ExecEnv {
            arena: &mut self.arena,
            weights: self.artifact.tensors(),
            kv,
        };
        for s in &self.steps {
            (s.kernel)(&s.args, &s.params, &mut env).map_err(|f| fault_to_error(&s.impl_id, f))?;
        }
        Ok(self.arena.row(Buf::Logits, 0))
    }

    /// Input slot for base features (draft plans).
    pub fn features_in_mut(&mut self) -> &mut [f32] {
        self.arena.buf_mut(Buf::FeatIn)
    }

    /// Logits of the last replayed (or captured) step.
    pub fn logits(&self) -> &[f32] {
        self.arena.row(Buf::Logits, 0)
    }

    /// Base features of the last replayed step.
    pub fn features(&self) -> &[f32] {
        self.arena.row(Buf::Features, 0)
    }

    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn geometry(&self) -> KvGeometry {
        self.geometry
    }

    pub fn artifact(&self) -> &Arc<ModelArtifact> {
        &self.artifact
    }
}
