use std::collections::HashMap;

use super::compress::{dequantize_layer, quantize_layer, Compression};
use super::store::{KvGeometry, KvStore};
use crate::alloc::AllocCounter;
use crate::artifact::ModelArtifact;
use crate::config::{KvConfig, SlotSpec};
use crate::dispatch::DispatchTable;
use crate::error::{Error, Result};
use crate::kernels::{Arena, Buf};
use crate::model::forward::{forward_pass, Pass};

/// Quantized copy of a slot's prefix K/V, written at release.
#[derive(Debug)]
struct ColdPrefix {
    k_scales: Vec<f32>,
    v_scales: Vec<f32>,
    k_codes: Vec<i8>,
    v_codes: Vec<i8>,
}

/// Pre-allocated KV storage bound to one request id.
///
/// Positions `[0, K)` hold the warmed prefix and are frozen; the suffix
/// region is recycled on every acquire. The draft region is a separate
/// allocation with the draft model's depth.
#[derive(Debug)]
pub struct KvSlot {
    request_id: String,
    prefix: Vec<u32>,
    max_new_tokens: usize,
    base: KvStore,
    draft: Option<KvStore>,
    in_use: bool,
    warmed: bool,
    /// The hot prefix has been replaced by `cold`.
    is_cold: bool,
    cold: Option<ColdPrefix>,
    prefix_logits: Vec<f32>,
    prefix_features: Vec<f32>,
}

impl KvSlot {
    pub fn request_id(&self) -> &str {
        &self.request_id
    }

    pub fn prefix(&self) -> &[u32] {
        &self.prefix
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.len()
    }

    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }

    pub fn current_len(&self) -> usize {
        self.base.len()
    }

    pub fn capacity(&self) -> usize {
        self.base.capacity()
    }

    pub fn in_use(&self) -> bool {
        self.in_use
    }

    pub fn is_warmed(&self) -> bool {
        self.warmed
    }

    pub fn base(&self) -> &KvStore {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut KvStore {
        &mut self.base
    }

    pub fn draft(&self) -> Option<&KvStore> {
        self.draft.as_ref()
    }

    pub fn draft_mut(&mut self) -> Option<&mut KvStore> {
        self.draft.as_mut()
    }

    /// Base and draft stores borrowed together.
    pub fn stores_mut(&mut self) -> (&mut KvStore, Option<&mut KvStore>) {
        (&mut self.base, self.draft.as_mut())
    }

    /// Logits and features of the last prefix position, kept from warmup.
    pub fn prefix_output(&self) -> Option<(&[f32], &[f32])> {
        (self.warmed && !self.prefix.is_empty()).then(|| (&self.prefix_logits[..], &self.prefix_features[..]))
    }

    /// Drops base entries at and beyond `new_len`.
    pub fn truncate(&mut self, new_len: usize) -> Result<()> {
        let k = self.prefix_len();
        if new_len < k || new_len > self.base.len() {
            return Err(Error::Range(format!(
                "truncate to {new_len} outside [{k}, {}]",
                self.base.len()
            )));
        }
        self.base.set_len(new_len);
        Ok(())
    }

    /// Truncates the draft region; it has no frozen prefix.
    pub fn truncate_draft(&mut self, new_len: usize) -> Result<()> {
        let d = self
            .draft
            .as_mut()
            .ok_or_else(|| Error::Validation("slot has no draft region".into()))?;
        if new_len > d.len() {
            return Err(Error::Range(format!("draft truncate to {new_len} > {}", d.len())));
        }
        d.set_len(new_len);
        Ok(())
    }

    /// SHA-256 of the frozen prefix region.
    pub fn prefix_checksum(&self) -> [u8; 32] {
        self.base.checksum(0, self.prefix_len())
    }

    fn compress_prefix(&mut self, strategy: Compression) {
        let k = self.prefix_len();
        let Some(cold) = self.cold.as_mut() else { return };
        if strategy == Compression::None || k == 0 || self.is_cold {
            return;
        }
        let g = self.base.geometry();
        let ch = g.kv_dim();
        for l in 0..g.n_layers {
            let sc = l * ch..(l + 1) * ch;
            let cd = l * k * ch..(l + 1) * k * ch;
            quantize_layer(
                self.base.k_range(l, 0, k),
                ch,
                &mut cold.k_scales[sc.clone()],
                &mut cold.k_codes[cd.clone()],
            );
            quantize_layer(
                self.base.v_range(l, 0, k),
                ch,
                &mut cold.v_scales[sc],
                &mut cold.v_codes[cd],
            );
            self.base.k_range_mut(l, 0, k).fill(0.0);
            self.base.v_range_mut(l, 0, k).fill(0.0);
        }
        self.is_cold = true;
    }

    fn reconstruct_prefix(&mut self) {
        if !self.is_cold {
            return;
        }
        let cold = self.cold.as_ref().expect("cold slots keep their codes");
        let k = self.prefix_len();
        let g = self.base.geometry();
        let ch = g.kv_dim();
        for l in 0..g.n_layers {
            let sc = l * ch..(l + 1) * ch;
            let cd = l * k * ch..(l + 1) * k * ch;
            dequantize_layer(
                &cold.k_codes[cd.clone()],
                ch,
                &cold.k_scales[sc.clone()],
                self.base.k_range_mut(l, 0, k),
            );
            dequantize_layer(
                &cold.v_codes[cd],
                ch,
                &cold.v_scales[sc],
                self.base.v_range_mut(l, 0, k),
            );
        }
        self.is_cold = false;
    }
}

/// All KV slots of an engine, allocated once at start.
#[derive(Debug)]
pub struct KvManager {
    cfg: KvConfig,
    slots: Vec<KvSlot>,
    index: HashMap<String, usize>,
    headroom: usize,
}

/// `(n_layers, n_kv_heads, head_dim)` of a model's cache.
pub type KvShape = (usize, usize, usize);

impl KvManager {
    /// Allocates every slot. Capacity per slot is `max_seq_len + headroom`,
    /// the headroom covering tentative speculative entries.
    pub fn init_slots(
        cfg: &KvConfig,
        slots: &[SlotSpec],
        base: KvShape,
        draft: Option<KvShape>,
        headroom: usize,
        alloc: &AllocCounter,
    ) -> Result<KvManager> {
        if slots.len() > cfg.max_slots {
            return Err(Error::Capacity(format!(
                "{} slots configured, max_slots is {}",
                slots.len(),
                cfg.max_slots
            )));
        }
        let capacity = cfg.max_seq_len + headroom;
        let geom = |(n_layers, n_kv_heads, head_dim): KvShape| KvGeometry {
            n_layers,
            n_kv_heads,
            head_dim,
            capacity,
        };
        let mut out = Vec::with_capacity(slots.len());
        let mut index = HashMap::new();
        for s in slots {
            if s.prefix.len() >= cfg.max_seq_len {
                return Err(Error::Capacity(format!(
                    "slot {:?}: prefix of {} tokens does not fit max_seq_len {}",
                    s.request_id,
                    s.prefix.len(),
                    cfg.max_seq_len
                )));
            }
            if index.insert(s.request_id.clone(), out.len()).is_some() {
                return Err(Error::Validation(format!("duplicate slot id {:?}", s.request_id)));
            }
            let k = s.prefix.len();
            let ch = base.1 * base.2;
            let cold = (cfg.compression != Compression::None && k > 0).then(|| ColdPrefix {
                k_scales: alloc.zeros(base.0 * ch),
                v_scales: alloc.zeros(base.0 * ch),
                k_codes: alloc.zeros(base.0 * k * ch),
                v_codes: alloc.zeros(base.0 * k * ch),
            });
            out.push(KvSlot {
                request_id: s.request_id.clone(),
                prefix: s.prefix.clone(),
                max_new_tokens: s.max_new_tokens,
                base: KvStore::new(geom(base), alloc),
                draft: draft.map(|d| KvStore::new(geom(d), alloc)),
                in_use: false,
                warmed: false,
                is_cold: false,
                cold,
                prefix_logits: Vec::new(),
                prefix_features: Vec::new(),
            });
        }
        Ok(KvManager {
            cfg: cfg.clone(),
            slots: out,
            index,
            headroom,
        })
    }

    pub fn config(&self) -> &KvConfig {
        &self.cfg
    }

    pub fn headroom(&self) -> usize {
        self.headroom
    }

    /// Computes and freezes the prefix KV of every slot not yet warmed.
    /// `arena` must have at least as many rows as the longest prefix.
    pub fn warmup(&mut self, artifact: &ModelArtifact, table: &DispatchTable, arena: &mut Arena) -> Result<()> {
        for slot in &mut self.slots {
            if slot.warmed {
                continue;
            }
            if !slot.prefix.is_empty() {
                slot.base.set_len(0);
                forward_pass(artifact, &mut slot.base, table, arena, Pass::prefill(&slot.prefix))?;
                slot.base.freeze(slot.prefix.len());
                slot.prefix_logits = arena.row(Buf::Logits, 0).to_vec();
                slot.prefix_features = arena.row(Buf::Features, slot.prefix.len() - 1).to_vec();
            }
            slot.warmed = true;
        }
        Ok(())
    }

    pub fn index_of(&self, request_id: &str) -> Result<usize> {
        self.index
            .get(request_id)
            .copied()
            .ok_or_else(|| Error::UnknownRequest(request_id.to_owned()))
    }

    /// Hands the slot bound to `request_id` to one request, recycling its
    /// suffix region and restoring a compressed prefix.
    pub fn acquire(&mut self, request_id: &str) -> Result<&mut KvSlot> {
        let i = self.index_of(request_id)?;
        let slot = &mut self.slots[i];
        if slot.in_use {
            return Err(Error::SlotBusy(request_id.to_owned()));
        }
        slot.reconstruct_prefix();
        slot.base.set_len(slot.prefix.len());
        if let Some(d) = slot.draft.as_mut() {
            d.set_len(0);
        }
        slot.in_use = true;
        Ok(slot)
    }

    /// Returns a slot; with compression enabled its prefix moves to cold
    /// storage until the next acquire.
    pub fn release(&mut self, request_id: &str) -> Result<()> {
        self.release_with(request_id, true)
    }

    pub(crate) fn release_with(&mut self, request_id: &str, compress: bool) -> Result<()> {
        let i = self.index_of(request_id)?;
        let strategy = self.cfg.compression;
        let slot = &mut self.slots[i];
        if !slot.in_use {
            return Ok(());
        }
        if compress {
            slot.compress_prefix(strategy);
        }
        slot.in_use = false;
        Ok(())
    }

    pub fn slot(&self, request_id: &str) -> Result<&KvSlot> {
        Ok(&self.slots[self.index_of(request_id)?])
    }

    pub fn slot_mut(&mut self, request_id: &str) -> Result<&mut KvSlot> {
        let i = self.index_of(request_id)?;
        Ok(&mut self.slots[i])
    }

    pub fn slots(&self) -> &[KvSlot] {
        &self.slots
    }

    pub fn longest_prefix(&self) -> usize {
        self.slots.iter().map(KvSlot::prefix_len).max().unwrap_or(0)
    }
}
