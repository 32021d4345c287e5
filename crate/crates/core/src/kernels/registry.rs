use std::collections::HashMap;

use serde_json::{json, Value};

use super::exec::{KernelFn, ParamMap};
use crate::dispatch::{OpKind, Stage};
use crate::error::{Error, Result};

/// One tunable integer parameter of a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: u64,
    pub min: u64,
    pub max: u64,
    pub description: &'static str,
}

/// A registered kernel implementation.
#[derive(Clone)]
pub struct KernelImpl {
    pub impl_id: String,
    pub op_kind: OpKind,
    pub stages: Vec<Stage>,
    /// Impls sharing a tag compute the same function and may replace each
    /// other (and be tuned against each other).
    pub semantics: String,
    pub params: Vec<ParamSpec>,
    /// Parameter sets the auto-tuner tries; empty means defaults only.
    pub tuning_space: Vec<ParamMap>,
    pub capturable: bool,
    pub description: String,
    pub run: KernelFn,
}

impl std::fmt::Debug for KernelImpl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelImpl")
            .field("impl_id", &self.impl_id)
            .field("op_kind", &self.op_kind)
            .field("stages", &self.stages)
            .field("semantics", &self.semantics)
            .finish_non_exhaustive()
    }
}

impl KernelImpl {
    /// An impl applicable to both stages with no parameters.
    pub fn new(impl_id: impl Into<String>, op_kind: OpKind, run: KernelFn) -> Self {
        Self {
            impl_id: impl_id.into(),
            op_kind,
            stages: vec![Stage::Prefill, Stage::Decode],
            semantics: op_kind.as_str().to_owned(),
            params: Vec::new(),
            tuning_space: Vec::new(),
            capturable: true,
            description: String::new(),
            run,
        }
    }

    pub fn stages(mut self, stages: &[Stage]) -> Self {
        self.stages = stages.to_vec();
        self
    }

    pub fn semantics(mut self, tag: impl Into<String>) -> Self {
        self.semantics = tag.into();
        self
    }

    pub fn param(mut self, spec: ParamSpec) -> Self {
        self.params.push(spec);
        self
    }

    pub fn tuning_space(mut self, space: Vec<ParamMap>) -> Self {
        self.tuning_space = space;
        self
    }

    pub fn describe(mut self, text: impl Into<String>) -> Self {
        self.description = text.into();
        self
    }

    pub fn capturable(mut self, yes: bool) -> Self {
        self.capturable = yes;
        self
    }

    pub fn supports(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Checks `params` against the declared schema.
    pub fn validate_params(&self, params: &ParamMap) -> Result<()> {
        let bad = |reason: String| Error::InvalidParams {
            impl_id: self.impl_id.clone(),
            reason,
        };
        for (k, v) in params {
            let spec = self
                .params
                .iter()
                .find(|p| p.name == k)
                .ok_or_else(|| bad(format!("unknown parameter {k:?}")))?;
            let n = v
                .as_u64()
                .ok_or_else(|| bad(format!("{k} must be a non-negative integer, got {v}")))?;
            if n < spec.min || n > spec.max {
                return Err(bad(format!("{k}={n} outside [{}, {}]", spec.min, spec.max)));
            }
        }
        Ok(())
    }

    /// Parameter sets to try when tuning.
    pub fn candidate_params(&self) -> Vec<ParamMap> {
        if self.tuning_space.is_empty() {
            vec![ParamMap::new()]
        } else {
            self.tuning_space.clone()
        }
    }

    pub fn listing(&self) -> Value {
        let params: Vec<Value> = self
            .params
            .iter()
            .map(|p| {
                json!({
                    "name": p.name,
                    "type": "integer",
                    "default": p.default,
                    "minimum": p.min,
                    "maximum": p.max,
                    "description": p.description,
                })
            })
            .collect();
        json!({
            "impl_id": self.impl_id,
            "op_kind": self.op_kind.as_str(),
            "stages": self.stages.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            "semantics": self.semantics,
            "capturable": self.capturable,
            "impl_params": params,
            "tuning_space": self.tuning_space,
            "description": self.description,
        })
    }
}

/// Reads an integer parameter, falling back to the declared default.
pub fn param_u64(params: &ParamMap, name: &str, default: u64) -> u64 {
    params.get(name).and_then(Value::as_u64).unwrap_or(default)
}

/// Kernel implementations by impl_id. Frozen (shared through `Arc`) once
/// an engine is built.
#[derive(Debug, Clone, Default)]
pub struct KernelRegistry {
    impls: Vec<KernelImpl>,
    index: HashMap<String, usize>,
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every built-in kernel.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        super::builtin::register_builtin_kernels(&mut r).expect("builtin impl ids are unique");
        r
    }

    pub fn register(&mut self, k: KernelImpl) -> Result<()> {
        if self.index.contains_key(&k.impl_id) {
            return Err(Error::DuplicateImpl(k.impl_id));
        }
        self.index.insert(k.impl_id.clone(), self.impls.len());
        self.impls.push(k);
        Ok(())
    }

    pub fn get(&self, impl_id: &str) -> Option<&KernelImpl> {
        self.index.get(impl_id).map(|&i| &self.impls[i])
    }

    pub fn contains(&self, impl_id: &str) -> bool {
        self.index.contains_key(impl_id)
    }

    pub fn impls(&self) -> &[KernelImpl] {
        &self.impls
    }

    pub fn by_kind(&self, kind: OpKind) -> impl Iterator<Item = &KernelImpl> {
        self.impls.iter().filter(move |k| k.op_kind == kind)
    }

    pub fn listing(&self) -> Value {
        Value::Array(self.impls.iter().map(KernelImpl::listing).collect())
    }
}
