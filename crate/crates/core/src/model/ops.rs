//! Scalar operator definitions shared by every kernel variant.
//!
//! All reductions run in index-ascending order with a single f32
//! accumulator; kernels built on these helpers are therefore bitwise
//! reproducible across prefill, decode and verification passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite masking constant used instead of `-inf`.
pub const V_SAFE: f32 = -1.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeVariant {
    /// One pass rotating each `(i, i + d/2)` pair.
    Fused,
    /// `x * cos + rotate_half(x) * sin` with `rotate_half` built by
    /// slice, negate and concat.
    Decomposed,
}

/// `y_i = x_i / sqrt(mean(x^2) + eps) * w_i`, written into `out`.
pub fn rmsnorm_into(x: &[f32], weight: &[f32], eps: f32, out: &mut [f32]) {
    debug_assert_eq!(x.len(), weight.len());
    debug_assert_eq!(x.len(), out.len());
    let mut sum_sq = 0.0f32;
    for &v in x {
        sum_sq += v * v;
    }
    let mean = sum_sq / x.len() as f32;
    let inv = 1.0 / (mean + eps).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
}

pub fn rmsnorm(x: &[f32], weight: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != weight.len() {
        return Err(Error::Shape(format!(
            "rmsnorm: input length {} != weight length {}",
            x.len(),
            weight.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Validation("rmsnorm: eps must be positive".into()));
    }
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(x, weight, eps, &mut out);
    Ok(out)
}

/// Rotation angle cos/sin for pair `i` of a `head_dim`-wide head at `pos`.
#[inline]
pub fn rope_cos_sin(pos: usize, i: usize, head_dim: usize, theta: f32) -> (f32, f32) {
    let inv_freq = (theta as f64).powf(-((2 * i) as f64) / head_dim as f64);
    let angle = pos as f64 * inv_freq;
    (angle.cos() as f32, angle.sin() as f32)
}

/// Fills `cos`/`sin` (each `head_dim / 2` long) for one position.
pub fn rope_table_into(pos: usize, head_dim: usize, theta: f32, cos: &mut [f32], sin: &mut [f32]) {
    for i in 0..head_dim / 2 {
        let (c, s) = rope_cos_sin(pos, i, head_dim, theta);
        cos[i] = c;
        sin[i] = s;
    }
}

/// Rotates one head in place, pairwise.
#[inline]
pub fn rope_head_fused(head: &mut [f32], cos: &[f32], sin: &[f32]) {
    let half = head.len() / 2;
    for i in 0..half {
        let a = head[i];
        let b = head[i + half];
        head[i] = a * cos[i] - b * sin[i];
        head[i + half] = b * cos[i] + a * sin[i];
    }
}

/// Rotates one head in place through an explicit `rotate_half` buffer.
#[inline]
pub fn rope_head_decomposed(head: &mut [f32], cos: &[f32], sin: &[f32], rot: &mut [f32]) {
    let d = head.len();
    let half = d / 2;
    let (lo, hi) = rot[..d].split_at_mut(half);
    // slice + negate the upper half, then concat the lower half after it
    for (r, &v) in lo.iter_mut().zip(&head[half..]) {
        *r = -v;
    }
    hi.copy_from_slice(&head[..half]);
    for j in 0..d {
        let k = j % half;
        head[j] = head[j] * cos[k] + rot[j] * sin[k];
    }
}

/// Rotary embedding over `[seq, heads, head_dim]` data.
pub fn apply_rope(
    x: &[f32],
    heads: usize,
    head_dim: usize,
    positions: &[usize],
    theta: f32,
    variant: RopeVariant,
) -> Result<Vec<f32>> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Shape(format!("rope: head_dim {head_dim} must be even")));
    }
    if x.len() != positions.len() * heads * head_dim {
        return Err(Error::Shape(format!(
            "rope: {} values for {} positions x {heads} heads x {head_dim}",
            x.len(),
            positions.len()
        )));
    }
    let mut out = x.to_vec();
    let half = head_dim / 2;
    let mut cos = vec![0.0; half];
    let mut sin = vec![0.0; half];
    let mut rot = vec![0.0; head_dim];
    for (row, &pos) in out.chunks_exact_mut(heads * head_dim).zip(positions) {
        rope_table_into(pos, head_dim, theta, &mut cos, &mut sin);
        for head in row.chunks_exact_mut(head_dim) {
            match variant {
                RopeVariant::Fused => rope_head_fused(head, &cos, &sin),
                RopeVariant::Decomposed => rope_head_decomposed(head, &cos, &sin, &mut rot),
            }
        }
    }
    Ok(out)
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

#[inline]
pub fn gelu_tanh_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_erf_scalar(x: f32) -> f32 {
    let xd = x as f64;
    (0.5 * xd * (1.0 + libm::erf(xd / std::f64::consts::SQRT_2))) as f32
}

pub fn gelu(x: &[f32], variant: crate::artifact::GeluVariant) -> Vec<f32> {
    use crate::artifact::GeluVariant;
    let f = match variant {
        GeluVariant::Tanh => gelu_tanh_scalar,
        GeluVariant::Erf => gelu_erf_scalar,
    };
    x.iter().map(|&v| f(v)).collect()
}

/// Numerically stable softmax of one row, in place.
#[inline]
pub fn softmax_inplace(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `where(keep, score, v_safe)` followed by softmax.
#[inline]
pub fn masked_softmax_row(row: &mut [f32], keep: impl Fn(usize) -> bool, v_safe: f32) -> Result<(), MaskedRowError> {
    let mut any = false;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            any = true;
        } else {
            *v = v_safe;
        }
    }
    if !any {
        return Err(MaskedRowError);
    }
    softmax_inplace(row);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedRowError;

/// Row-wise masked softmax over a `[rows, row_len]` array; `mask[i]` true
/// means the entry is kept.
pub fn masked_softmax(scores: &[f32], mask: &[bool], row_len: usize, v_safe: f32) -> Result<Vec<f32>> {
    if scores.len() != mask.len() || row_len == 0 || !scores.len().is_multiple_of(row_len) {
        return Err(Error::Shape(format!(
            "masked_softmax: {} scores, {} mask entries, row length {row_len}",
            scores.len(),
            mask.len()
        )));
    }
    let mut out = scores.to_vec();
    for (row, m) in out.chunks_exact_mut(row_len).zip(mask.chunks_exact(row_len)) {
        masked_softmax_row(row, |j| m[j], v_safe).map_err(|_| Error::DegenerateRow)?;
    }
    Ok(out)
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best as u32
}
