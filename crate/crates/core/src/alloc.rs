use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Counts runtime buffer allocations (KV storage, scratch arenas, plan
/// buffers). Steady-state decode must leave it unchanged.
#[derive(Debug, Clone, Default)]
pub struct AllocCounter {
    inner: Arc<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    count: AtomicU64,
    bytes: AtomicU64,
}

impl AllocCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates a zeroed buffer and records it.
    pub fn zeros<T: Clone + Default>(&self, len: usize) -> Vec<T> {
        self.inner.count.fetch_add(1, Ordering::Relaxed);
        self.inner
            .bytes
            .fetch_add((len * std::mem::size_of::<T>()) as u64, Ordering::Relaxed);
        vec![T::default(); len]
    }

    pub fn count(&self) -> u64 {
        self.inner.count.load(Ordering::Relaxed)
    }

    pub fn bytes(&self) -> u64 {
        self.inner.bytes.load(Ordering::Relaxed)
    }
}
