//! KV compression as a transformation `C(KV)` plus reconstruction.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    #[default]
    None,
    /// Symmetric int8 with one scale per (layer, kv head, channel).
    Int8PerChannel,
}

/// A dense block of K or V values laid out `[layer][position][kv_head][head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub n_layers: usize,
    pub positions: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub data: Vec<f32>,
}

impl KvBlock {
    pub fn zeros(n_layers: usize, positions: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            n_layers,
            positions,
            n_kv_heads,
            head_dim,
            data: vec![0.0; n_layers * positions * n_kv_heads * head_dim],
        }
    }

    pub fn channels(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }
}

/// Compressed form of a [`KvBlock`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock {
    pub strategy: Compression,
    pub n_layers: usize,
    pub positions: usize,
    pub channels: usize,
    /// `[layer][channel]`
    pub scales: Vec<f32>,
    /// `[layer][position][channel]`
    pub codes: Vec<i8>,
    /// Verbatim copy for [`Compression::None`].
    pub raw: Vec<f32>,
}

impl CompressedBlock {
    pub fn bytes(&self) -> usize {
        self.scales.len() * 4 + self.codes.len() + self.raw.len() * 4
    }
}

/// Rounds a positive scale up to 17 significant bits so that every
/// lattice point `q * s` with `|q| <= 127` is an exact f32.
pub fn lattice_scale(max_abs: f32) -> f32 {
    if max_abs == 0.0 {
        return 0.0;
    }
    let exact = max_abs as f64 / 127.0;
    let mut s = exact as f32;
    if (s as f64) < exact {
        s = f32::from_bits(s.to_bits() + 1);
    }
    let bits = s.to_bits();
    let low = bits & 0x7f;
    if low == 0 {
        s
    } else {
        f32::from_bits((bits & !0x7f) + 0x80)
    }
}

#[inline]
fn quantize(v: f32, s: f32) -> i8 {
    if s == 0.0 {
        return 0;
    }
    (v as f64 / s as f64).round().clamp(-127.0, 127.0) as i8
}

/// Quantizes `[positions][channels]` values of one layer.
pub fn quantize_layer(src: &[f32], channels: usize, scales: &mut [f32], codes: &mut [i8]) {
    for (c, scale) in scales.iter_mut().enumerate().take(channels) {
        let mut max = 0.0f32;
        for row in src.chunks_exact(channels) {
            max = max.max(row[c].abs());
        }
        *scale = lattice_scale(max);
    }
    for (row, out) in src.chunks_exact(channels).zip(codes.chunks_exact_mut(channels)) {
        for c in 0..channels {
            out[c] = quantize(row[c], scales[c]);
        }
    }
}

pub fn dequantize_layer(codes: &[i8], channels: usize, scales: &[f32], out: &mut [f32]) {
    for (row, dst) in codes.chunks_exact(channels).zip(out.chunks_exact_mut(channels)) {
        for c in 0..channels {
            dst[c] = row[c] as f32 * scales[c];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Compressor {
    pub strategy: Compression,
}

impl Compressor {
    pub fn new(strategy: Compression) -> Self {
        Self { strategy }
    }

    pub fn compress(&self, block: &KvBlock) -> CompressedBlock {
        let ch = block.channels();
        let per_layer = block.positions * ch;
        let mut out = CompressedBlock {
            strategy: self.strategy,
            n_layers: block.n_layers,
            positions: block.positions,
            channels: ch,
            scales: Vec::new(),
            codes: Vec::new(),
            raw: Vec::new(),
        };
        match self.strategy {
            Compression::None => out.raw = block.data.clone(),
            Compression::Int8PerChannel => {
                out.scales = vec![0.0; block.n_layers * ch];
                out.codes = vec![0; block.n_layers * per_layer];
                for l in 0..block.n_layers {
                    quantize_layer(
                        &block.data[l * per_layer..(l + 1) * per_layer],
                        ch,
                        &mut out.scales[l * ch..(l + 1) * ch],
                        &mut out.codes[l * per_layer..(l + 1) * per_layer],
                    );
                }
            }
        }
        out
    }

    pub fn reconstruct(&self, c: &CompressedBlock, n_kv_heads: usize) -> KvBlock {
        let mut block = KvBlock::zeros(c.n_layers, c.positions, n_kv_heads, c.channels / n_kv_heads);
        let per_layer = c.positions * c.channels;
        match c.strategy {
            Compression::None => block.data.copy_from_slice(&c.raw),
            Compression::Int8PerChannel => {
                for l in 0..c.n_layers {
                    dequantize_layer(
                        &c.codes[l * per_layer..(l + 1) * per_layer],
                        c.channels,
                        &c.scales[l * c.channels..(l + 1) * c.channels],
                        &mut block.data[l * per_layer..(l + 1) * per_layer],
                    );
                }
            }
        }
        block
    }
}

/// Compresses and immediately reconstructs a block.
pub fn compress_roundtrip(c: &Compressor, block: &KvBlock) -> KvBlock {
    c.reconstruct(&c.compress(block), block.n_kv_heads)
}
