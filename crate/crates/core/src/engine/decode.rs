//! Plain and speculative greedy decode loops.

use std::sync::Arc;
use std::time::Instant;

use super::stats::{ms, SpecStats};
use crate::alloc::AllocCounter;
use crate::artifact::ModelArtifact;
use crate::dispatch::{DispatchTable, Stage};
use crate::error::{Error, Result};
use crate::kernels::StepPlan;
use crate::kv::KvStore;
use crate::model::forward::{LogitRows, ModelRunner, Pass};
use crate::model::ops::argmax;

/// Stopping rule shared by both loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopRule {
    pub max_new: usize,
    /// Never emitted; generation ends when it is produced.
    pub stop_token: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopOutput {
    pub tokens: Vec<u32>,
    pub per_step_ms: Vec<f64>,
    pub speculative: Option<SpecStats>,
}

/// Greedy decode: each emitted token is the argmax of the logits produced
/// by feeding its predecessor. Uses `plan` for steps when given.
pub fn decode_loop_plain(
    runner: &mut ModelRunner,
    mut plan: Option<&mut StepPlan>,
    kv: &mut KvStore,
    table: &DispatchTable,
    first_logits: &[f32],
    rule: StopRule,
) -> Result<LoopOutput> {
    let mut out = LoopOutput::default();
    if rule.max_new == 0 {
        return Ok(out);
    }
    let mut logits = first_logits.to_vec();
    out.tokens.reserve(rule.max_new);
    out.per_step_ms.reserve(rule.max_new);
    loop {
        let t = Instant::now();
        let tok = argmax(&logits);
        if rule.stop_token == Some(tok) {
            break;
        }
        out.tokens.push(tok);
        if out.tokens.len() < rule.max_new {
            match plan.as_deref_mut() {
                Some(p) => {
                    let pos = kv.len();
                    logits.copy_from_slice(p.replay(tok, pos, kv)?);
                }
                None => {
                    runner.run(kv, table, Pass::decode(&[tok]))?;
                    logits.copy_from_slice(runner.logits(0));
                }
            }
        }
        out.per_step_ms.push(ms(t.elapsed()));
        if out.tokens.len() == rule.max_new {
            break;
        }
    }
    Ok(out)
}

/// Proposes draft tokens for the speculative loop.
pub trait Drafter {
    /// Appends exactly `m` proposed continuations of `context` to `out`.
    ///
    /// `context` holds every committed token; its last token is not yet in
    /// the base cache. `features` are the base model's tap features at the
    /// last cached position.
    fn propose(
        &mut self,
        context: &[u32],
        features: &[f32],
        m: usize,
        draft_kv: Option<&mut KvStore>,
        table: &DispatchTable,
        out: &mut Vec<u32>,
    ) -> Result<()>;
}

/// Draft model conditioned on base features, running in the slot's
/// dedicated draft region.
#[derive(Debug)]
pub struct ModelDrafter {
    runner: ModelRunner,
    plan: Option<StepPlan>,
}

impl ModelDrafter {
    pub fn new(artifact: Arc<ModelArtifact>, kv_capacity: usize, alloc: &AllocCounter) -> Self {
        Self {
            runner: ModelRunner::new(artifact, kv_capacity, kv_capacity, alloc),
            plan: None,
        }
    }

    pub fn artifact(&self) -> &Arc<ModelArtifact> {
        self.runner.artifact()
    }

    /// Records a single draft step on `kv` (which is left one entry longer).
    pub fn capture(&mut self, kv: &mut KvStore, table: &DispatchTable, alloc: &AllocCounter) -> Result<()> {
        let zeros = vec![0.0; self.artifact().arch.feature_dim()];
        self.plan = Some(StepPlan::capture(
            self.artifact().clone(),
            0,
            kv,
            table,
            Some(&zeros),
            alloc,
        )?);
        Ok(())
    }

    pub fn plan(&self) -> Option<&StepPlan> {
        self.plan.as_ref()
    }

    fn step(&mut self, token: u32, features: &[f32], kv: &mut KvStore, table: &DispatchTable) -> Result<u32> {
        match self.plan.as_mut() {
            Some(p) => {
                p.features_in_mut().copy_from_slice(features);
                let pos = kv.len();
                Ok(argmax(p.replay(token, pos, kv)?))
            }
            None => {
                self.runner
                    .run(kv, table, Pass::decode(&[token]).with_features(features))?;
                Ok(argmax(self.runner.logits(0)))
            }
        }
    }
}

impl Drafter for ModelDrafter {
    fn propose(
        &mut self,
        context: &[u32],
        features: &[f32],
        m: usize,
        draft_kv: Option<&mut KvStore>,
        table: &DispatchTable,
        out: &mut Vec<u32>,
    ) -> Result<()> {
        let kv = draft_kv.ok_or_else(|| Error::Validation("model drafter needs a draft KV region".into()))?;
        let last = context.len() - 1;
        // entries past `last` were computed from draft guesses
        let keep = kv.len().min(last);
        kv.set_len(keep);
        let mut tok = if context.len() - keep == 1 {
            self.step(context[last], features, kv, table)?
        } else {
            let pass = Pass {
                tokens: &context[keep..],
                stage: Stage::Prefill,
                logits: LogitRows::Last,
                features: Some(features),
            };
            self.runner.run(kv, table, pass)?;
            argmax(self.runner.logits(0))
        };
        out.push(tok);
        for _ in 1..m {
            tok = self.step(tok, features, kv, table)?;
            out.push(tok);
        }
        Ok(())
    }
}

/// Speculative greedy decode.
///
/// Each cycle the drafter proposes `m` tokens; one batched base pass over
/// `[pending, d_1 .. d_m]` scores them. Drafts are accepted while they
/// equal the base argmax; the base argmax at the first mismatch (or after
/// the last draft) is committed too, and the base cache is cut back to
/// the committed length.
#[allow(clippy::too_many_arguments)]
pub fn decode_loop_speculative(
    runner: &mut ModelRunner,
    kv: &mut KvStore,
    mut draft_kv: Option<&mut KvStore>,
    table: &DispatchTable,
    drafter: &mut dyn Drafter,
    prompt: &[u32],
    first_logits: &[f32],
    first_features: &[f32],
    m: usize,
    rule: StopRule,
) -> Result<LoopOutput> {
    if m == 0 {
        return Err(Error::Validation("draft block length must be at least 1".into()));
    }
    if runner.arena().rows() < m + 1 {
        return Err(Error::Capacity(format!("verification needs {} scratch rows", m + 1)));
    }
    let vocab = runner.artifact().arch.vocab_size;
    let mut out = LoopOutput::default();
    let (mut proposed, mut accepted, mut cycles) = (0u64, 0u64, 0u64);
    let finish = |mut out: LoopOutput, p: u64, a: u64, c: u64| -> Result<LoopOutput> {
        out.speculative = Some(SpecStats::from_counts(p, a, c));
        Ok(out)
    };
    if rule.max_new == 0 {
        return finish(out, 0, 0, 0);
    }
    let t = Instant::now();
    let first = argmax(first_logits);
    if rule.stop_token == Some(first) {
        return finish(out, 0, 0, 0);
    }
    out.tokens.push(first);
    out.per_step_ms.push(ms(t.elapsed()));
    let mut context = Vec::with_capacity(prompt.len() + rule.max_new + m + 1);
    context.extend_from_slice(prompt);
    context.push(first);
    let mut features = first_features.to_vec();
    let mut drafts = Vec::with_capacity(m);
    let mut block = Vec::with_capacity(m + 1);
    while out.tokens.len() < rule.max_new {
        let t = Instant::now();
        let base_len = kv.len();
        debug_assert_eq!(base_len + 1, context.len());
        drafts.clear();
        drafter.propose(&context, &features, m, draft_kv.as_deref_mut(), table, &mut drafts)?;
        if drafts.len() != m || drafts.iter().any(|&d| d as usize >= vocab) {
            return Err(Error::Validation(format!(
                "drafter returned {} tokens (expected {m} ids below {vocab})",
                drafts.len()
            )));
        }
        block.clear();
        block.push(*context.last().expect("context holds the pending token"));
        block.extend_from_slice(&drafts);
        runner.run(
            kv,
            table,
            Pass {
                tokens: &block,
                stage: Stage::Prefill,
                logits: LogitRows::All,
                features: None,
            },
        )?;
        let mut a = 0;
        while a < m && argmax(runner.logits(a)) == drafts[a] {
            a += 1;
        }
        let correction = argmax(runner.logits(a));
        cycles += 1;
        proposed += m as u64;
        accepted += a as u64;
        kv.set_len(base_len + a + 1);
        features.copy_from_slice(runner.features(a));

        let before = out.tokens.len();
        let mut stopped = false;
        for &tok in drafts[..a].iter().chain(std::iter::once(&correction)) {
            if rule.stop_token == Some(tok) {
                stopped = true;
                break;
            }
            out.tokens.push(tok);
            context.push(tok);
            if out.tokens.len() == rule.max_new {
                break;
            }
        }
        let committed = out.tokens.len() - before;
        if committed > 0 {
            let each = ms(t.elapsed()) / committed as f64;
            out.per_step_ms.extend(std::iter::repeat_n(each, committed));
        }
        if stopped {
            break;
        }
    }
    finish(out, proposed, accepted, cycles)
}
