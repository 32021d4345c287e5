use sha2::{Digest, Sha256};

use crate::alloc::AllocCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvGeometry {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub capacity: usize,
}

impl KvGeometry {
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    fn layer_stride(&self) -> usize {
        self.capacity * self.kv_dim()
    }

    pub fn numel(&self) -> usize {
        self.n_layers * self.layer_stride()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvWriteError {
    Capacity,
    Frozen,
    NotAppend,
}

/// Contiguous K/V storage laid out `[layer][position][kv_head][head_dim]`.
///
/// Positions below `frozen_len` reject writes. `len` advances when the last
/// layer of a pass has been written.
#[derive(Debug, Clone)]
pub struct KvStore {
    geometry: KvGeometry,
    k: Vec<f32>,
    v: Vec<f32>,
    len: usize,
    frozen_len: usize,
}

impl KvStore {
    pub fn new(geometry: KvGeometry, alloc: &AllocCounter) -> Self {
        let n = geometry.numel();
        Self {
            geometry,
            k: alloc.zeros(n),
            v: alloc.zeros(n),
            len: 0,
            frozen_len: 0,
        }
    }

    pub fn geometry(&self) -> KvGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.geometry.capacity
    }

    pub fn frozen_len(&self) -> usize {
        self.frozen_len
    }

    pub(crate) fn freeze(&mut self, upto: usize) {
        assert!(upto <= self.len);
        self.frozen_len = upto;
    }

    /// Drops positions `>= new_len`. The frozen prefix is never dropped.
    pub(crate) fn set_len(&mut self, new_len: usize) {
        assert!(new_len >= self.frozen_len && new_len <= self.geometry.capacity);
        self.len = new_len;
    }

    fn offset(&self, layer: usize, pos: usize) -> usize {
        layer * self.geometry.layer_stride() + pos * self.geometry.kv_dim()
    }

    /// Writes `rows` positions of K and V for `layer`, starting at `start`.
    pub fn append_rows(
        &mut self,
        layer: usize,
        start: usize,
        rows: usize,
        k_rows: &[f32],
        v_rows: &[f32],
    ) -> Result<(), KvWriteError> {
        let g = self.geometry;
        if start != self.len {
            return Err(KvWriteError::NotAppend);
        }
        if start < self.frozen_len {
            return Err(KvWriteError::Frozen);
        }
        if start + rows > g.capacity {
            return Err(KvWriteError::Capacity);
        }
        let n = rows * g.kv_dim();
        let off = self.offset(layer, start);
        self.k[off..off + n].copy_from_slice(&k_rows[..n]);
        self.v[off..off + n].copy_from_slice(&v_rows[..n]);
        if layer + 1 == g.n_layers {
            self.len = start + rows;
        }
        Ok(())
    }

    /// K vector of one kv head at one position.
    #[inline]
    pub fn k_at(&self, layer: usize, pos: usize, kv_head: usize) -> &[f32] {
        let d = self.geometry.head_dim;
        let off = self.offset(layer, pos) + kv_head * d;
        &self.k[off..off + d]
    }

    #[inline]
    pub fn v_at(&self, layer: usize, pos: usize, kv_head: usize) -> &[f32] {
        let d = self.geometry.head_dim;
        let off = self.offset(layer, pos) + kv_head * d;
        &self.v[off..off + d]
    }

    /// K rows `[from, to)` of a layer, flattened.
    pub fn k_range(&self, layer: usize, from: usize, to: usize) -> &[f32] {
        &self.k[self.offset(layer, from)..self.offset(layer, to)]
    }

    pub fn v_range(&self, layer: usize, from: usize, to: usize) -> &[f32] {
        &self.v[self.offset(layer, from)..self.offset(layer, to)]
    }

    pub(crate) fn k_range_mut(&mut self, layer: usize, from: usize, to: usize) -> &mut [f32] {
        let (a, b) = (self.offset(layer, from), self.offset(layer, to));
        &mut self.k[a..b]
    }

    pub(crate) fn v_range_mut(&mut self, layer: usize, from: usize, to: usize) -> &mut [f32] {
        let (a, b) = (self.offset(layer, from), self.offset(layer, to));
        &mut self.v[a..b]
    }

    /// SHA-256 over the K and V bytes of positions `[from, to)` in every layer.
    pub fn checksum(&self, from: usize, to: usize) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in 0..self.geometry.n_layers {
            for v in self
                .k_range(layer, from, to)
                .iter()
                .chain(self.v_range(layer, from, to))
            {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Copies of the live K and V entries, layer-major.
    pub fn snapshot(&self) -> (Vec<f32>, Vec<f32>) {
        let mut k = Vec::new();
        let mut v = Vec::new();
        for layer in 0..self.geometry.n_layers {
            k.extend_from_slice(self.k_range(layer, 0, self.len));
            v.extend_from_slice(self.v_range(layer, 0, self.len));
        }
        (k, v)
    }

    /// Raw view of every K and V value, dead positions included.
    pub fn raw(&self) -> (&[f32], &[f32]) {
        (&self.k, &self.v)
    }
}
