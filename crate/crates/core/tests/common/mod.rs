#![allow(dead_code)]

pub mod checks;

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use std::sync::Arc;

use edgert::artifact::{generate_reference_base, generate_reference_draft, ModelArtifact, Param, ResolvedArtifacts};
use edgert::config::{EngineConfig, SlotConfig};
use edgert::kernels::KernelRegistry;
use edgert::rng::Lcg64;
use edgert::Engine;

pub fn base(seed: u64) -> Arc<ModelArtifact> {
    Arc::new(generate_reference_base(seed))
}

pub fn draft(seed: u64) -> Arc<ModelArtifact> {
    Arc::new(generate_reference_draft(seed))
}

/// Draft sharing the base's embedding, final norm and head, so its
/// proposals agree with the base some of the time.
pub fn aligned_draft(base: &ModelArtifact, seed: u64) -> Arc<ModelArtifact> {
    let mut d = generate_reference_draft(seed);
    for p in [Param::Embed, Param::FinalNorm, Param::LmHead] {
        d.param_mut(p).data.copy_from_slice(&base.param(p).data);
    }
    Arc::new(d)
}

pub fn artifacts(base: Arc<ModelArtifact>, draft: Option<Arc<ModelArtifact>>) -> ResolvedArtifacts {
    ResolvedArtifacts {
        prefill: base.clone(),
        decode: base,
        draft,
    }
}

/// In-memory config; artifact paths are placeholders since
/// [`Engine::from_parts`] takes loaded artifacts.
pub fn config(max_seq_len: usize, slots: Vec<SlotConfig>) -> EngineConfig {
    let mut cfg = EngineConfig::minimal("unused.efmt");
    cfg.kv.max_slots = slots.len().max(1);
    cfg.kv.max_seq_len = max_seq_len;
    cfg.slots = slots;
    cfg
}

pub fn engine(cfg: EngineConfig, arts: ResolvedArtifacts) -> Engine {
    Engine::from_parts(cfg, arts, KernelRegistry::builtin()).expect("engine builds")
}

pub fn tokens(rng: &mut Lcg64, n: usize, vocab: u32) -> Vec<u32> {
    (0..n).map(|_| rng.next_below(vocab)).collect()
}

/// Counts heap allocations per thread, so parallel tests do not see each
/// other's.
struct CountingAlloc;

thread_local! {
    static ALLOCS: Cell<u64> = const { Cell::new(0) };
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let _ = ALLOCS.try_with(|c| c.set(c.get() + 1));
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let _ = ALLOCS.try_with(|c| c.set(c.get() + 1));
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

pub fn thread_allocs() -> u64 {
    ALLOCS.with(|c| c.get())
}
