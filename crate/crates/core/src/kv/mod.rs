//! Slot-based KV cache.

pub mod compress;
mod manager;
mod store;

pub use compress::{compress_roundtrip, lattice_scale, CompressedBlock, Compression, Compressor, KvBlock};
pub use manager::{KvManager, KvShape, KvSlot};
pub use store::{KvGeometry, KvStore, KvWriteError};
