//! Reference CPU kernels.
//!
//! Schedule variants of one op kind (the three linears, the two attention
//! kernels, the two rope kernels) produce bitwise identical results: every
//! reduction runs index-ascending into a single f32 accumulator.

use serde_json::json;

use super::exec::{Buf, ExecEnv, KernelFault, OpArgs, ParamMap};
use super::registry::{param_u64, KernelImpl, KernelRegistry, ParamSpec};
use crate::dispatch::{OpKind, Stage};
use crate::error::Result;
use crate::kv::KvWriteError;
use crate::model::ops::{
    gelu_erf_scalar, gelu_tanh_scalar, masked_softmax_row, rmsnorm_into, rope_head_decomposed, rope_head_fused,
    rope_table_into, softmax_inplace, V_SAFE,
};

pub const DEFAULT_TILE: u64 = 16;

type KResult = Result<(), KernelFault>;

fn wrong_args() -> KernelFault {
    KernelFault::Unsupported("operator arguments do not match kernel kind")
}

pub fn embedding_gather(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let OpArgs::Embed { table, out, rows } = *args else {
        return Err(wrong_args());
    };
    let table = &env.weights[table.0];
    let (vocab, h) = (table.shape[0], table.shape[1]);
    let arena = &mut *env.arena;
    for r in 0..rows {
        let tok = arena.tokens[r] as usize;
        if tok >= vocab {
            return Err(KernelFault::TokenOutOfRange);
        }
        arena.buf_mut(out)[r * h..(r + 1) * h].copy_from_slice(&table.data[tok * h..(tok + 1) * h]);
    }
    Ok(())
}

pub fn rmsnorm_ref(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let OpArgs::RmsNorm {
        input,
        weight,
        out,
        row0,
        rows,
        dim,
        eps,
    } = *args
    else {
        return Err(wrong_args());
    };
    let w = &env.weights[weight.0].data;
    let in_w = env.arena.width(input);
    let out_w = env.arena.width(out);
    let (x, y) = env.arena.pair(input, out);
    for r in 0..rows {
        let src = &x[(row0 + r) * in_w..(row0 + r) * in_w + dim];
        rmsnorm_into(src, w, eps, &mut y[r * out_w..r * out_w + dim]);
    }
    Ok(())
}

struct LinearView<'a> {
    x: &'a [f32],
    in_w: usize,
    w: &'a [f32],
    y: &'a mut [f32],
    out_w: usize,
    rows: usize,
    n_in: usize,
    n_out: usize,
}

fn linear_view<'a>(args: &OpArgs, env: &'a mut ExecEnv<'_>) -> Result<LinearView<'a>, KernelFault> {
    let OpArgs::Linear {
        input,
        weight,
        out,
        rows,
        in_features,
        out_features,
    } = *args
    else {
        return Err(wrong_args());
    };
    let w = &env.weights[weight.0].data;
    let in_w = env.arena.width(input);
    let out_w = env.arena.width(out);
    let (x, y) = env.arena.pair(input, out);
    Ok(LinearView {
        x,
        in_w,
        w,
        y,
        out_w,
        rows,
        n_in: in_features,
        n_out: out_features,
    })
}

/// `y[o] = sum_i x[i] * W[o][i]`, one output at a time.
pub fn linear_naive(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let v = linear_view(args, env)?;
    for r in 0..v.rows {
        let x = &v.x[r * v.in_w..r * v.in_w + v.n_in];
        let y = &mut v.y[r * v.out_w..r * v.out_w + v.n_out];
        for (o, yo) in y.iter_mut().enumerate() {
            let wrow = &v.w[o * v.n_in..(o + 1) * v.n_in];
            let mut acc = 0.0f32;
            for i in 0..v.n_in {
                acc += x[i] * wrow[i];
            }
            *yo = acc;
        }
    }
    Ok(())
}

/// Output and input dimensions walked in `tile`-sized blocks; partial sums
/// live in the output row between input tiles.
pub fn linear_blocked(args: &OpArgs, params: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let tile = param_u64(params, "tile", DEFAULT_TILE).max(1) as usize;
    let v = linear_view(args, env)?;
    for r in 0..v.rows {
        let x = &v.x[r * v.in_w..r * v.in_w + v.n_in];
        let y = &mut v.y[r * v.out_w..r * v.out_w + v.n_out];
        y.fill(0.0);
        #[allow(clippy::needless_range_loop)]
        for o0 in (0..v.n_out).step_by(tile) {
            let o1 = (o0 + tile).min(v.n_out);
            for i0 in (0..v.n_in).step_by(tile) {
                let i1 = (i0 + tile).min(v.n_in);
                for o in o0..o1 {
                    let wrow = &v.w[o * v.n_in..(o + 1) * v.n_in];
                    let mut acc = y[o];
                    for i in i0..i1 {
                        acc += x[i] * wrow[i];
                    }
                    y[o] = acc;
                }
            }
        }
    }
    Ok(())
}

/// Input-outer schedule: reads the weight column-wise, as if stored
/// transposed, and sweeps the whole output row per input element.
pub fn linear_transposed_b(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let v = linear_view(args, env)?;
    for r in 0..v.rows {
        let x = &v.x[r * v.in_w..r * v.in_w + v.n_in];
        let y = &mut v.y[r * v.out_w..r * v.out_w + v.n_out];
        y.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += xi * v.w[o * v.n_in + i];
            }
        }
    }
    Ok(())
}

fn rope_impl(args: &OpArgs, env: &mut ExecEnv<'_>, decomposed: bool) -> KResult {
    let OpArgs::Rope {
        buf,
        rows,
        heads,
        head_dim,
        theta,
    } = *args
    else {
        return Err(wrong_args());
    };
    if head_dim % 2 != 0 {
        return Err(KernelFault::Unsupported("rope needs an even head_dim"));
    }
    let pos0 = env.arena.position();
    let width = env.arena.width(buf);
    let half = head_dim / 2;
    let (x, scratch) = env.arena.pair_mut(buf, Buf::Rot);
    let (cs, rot) = scratch.split_at_mut(head_dim);
    let (cos, sin) = cs.split_at_mut(half);
    for r in 0..rows {
        rope_table_into(pos0 + r, head_dim, theta, cos, sin);
        let row = &mut x[r * width..r * width + heads * head_dim];
        for head in row.chunks_exact_mut(head_dim) {
            if decomposed {
                rope_head_decomposed(head, cos, sin, rot);
            } else {
                rope_head_fused(head, cos, sin);
            }
        }
    }
    Ok(())
}

pub fn rope_fused(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    rope_impl(args, env, false)
}

pub fn rope_decomposed(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    rope_impl(args, env, true)
}

pub fn kv_update_append(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let OpArgs::KvAppend {
        layer,
        k,
        v,
        rows,
        kv_heads,
        head_dim,
    } = *args
    else {
        return Err(wrong_args());
    };
    let g = env.kv.geometry();
    if g.n_kv_heads != kv_heads || g.head_dim != head_dim || layer >= g.n_layers {
        return Err(KernelFault::Unsupported("kv geometry does not match operator"));
    }
    let pos0 = env.arena.position();
    let kw = env.arena.width(k);
    let n = kv_heads * head_dim;
    if kw != n {
        return Err(KernelFault::Unsupported("k/v buffers must be packed rows"));
    }
    let kd = &env.arena.buf(k)[..rows * n];
    let vd = &env.arena.buf(v)[..rows * n];
    env.kv.append_rows(layer, pos0, rows, kd, vd).map_err(|e| match e {
        KvWriteError::Capacity => KernelFault::Capacity,
        KvWriteError::Frozen => KernelFault::FrozenPrefix,
        KvWriteError::NotAppend => KernelFault::NotAppend,
    })
}

/// `out += p_j * v_j` for every key with non-zero probability, ascending `j`.
#[inline]
fn accumulate_values(out: &mut [f32], probs: &[f32], env_kv: &crate::kv::KvStore, layer: usize, g: usize) {
    out.fill(0.0);
    for (j, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let v = env_kv.v_at(layer, j, g);
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += p * vv;
        }
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

struct AttnShape {
    layer: usize,
    q: Buf,
    out: Buf,
    rows: usize,
    heads: usize,
    kv_heads: usize,
    head_dim: usize,
}

fn attn_shape(args: &OpArgs, env: &ExecEnv<'_>) -> Result<AttnShape, KernelFault> {
    let OpArgs::Attention {
        layer,
        q,
        out,
        rows,
        heads,
        kv_heads,
        head_dim,
    } = *args
    else {
        return Err(wrong_args());
    };
    if kv_heads == 0 || heads % kv_heads != 0 {
        return Err(KernelFault::Unsupported("heads must be a multiple of kv_heads"));
    }
    let pos0 = env.arena.position();
    let len = env.kv.len();
    if pos0 + rows > env.kv.capacity() || (len != pos0 && len != pos0 + rows) {
        return Err(KernelFault::MissingKv);
    }
    Ok(AttnShape {
        layer,
        q,
        out,
        rows,
        heads,
        kv_heads,
        head_dim,
    })
}

/// Scores every key position of the pass and masks the causal future with
/// the finite constant [`V_SAFE`].
pub fn attention_prefill_masked(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let s = attn_shape(args, env)?;
    let pos0 = env.arena.position();
    let kv_len = pos0 + s.rows;
    let group = s.heads / s.kv_heads;
    let scale = (s.head_dim as f32).sqrt().recip();
    let qw = env.arena.width(s.q);
    let ow = env.arena.width(s.out);
    let kv = &*env.kv;
    let (out, q, scores) = env.arena.triple(s.out, s.q, Buf::Scores);
    for r in 0..s.rows {
        let p = pos0 + r;
        for h in 0..s.heads {
            let g = h / group;
            let qh = &q[r * qw + h * s.head_dim..r * qw + (h + 1) * s.head_dim];
            let row = &mut scores[..kv_len];
            for (j, sc) in row.iter_mut().enumerate().take(p + 1) {
                *sc = dot(qh, kv.k_at(s.layer, j, g)) * scale;
            }
            masked_softmax_row(row, |j| j <= p, V_SAFE)
                .map_err(|_| KernelFault::Unsupported("fully masked attention row"))?;
            let o = &mut out[r * ow + h * s.head_dim..r * ow + (h + 1) * s.head_dim];
            accumulate_values(o, row, kv, s.layer, g);
        }
    }
    Ok(())
}

/// Single-query attention over the cached keys `[0, position]`.
pub fn attention_decode_cached(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let s = attn_shape(args, env)?;
    if s.rows != 1 {
        return Err(KernelFault::Unsupported("decode_cached handles one query row"));
    }
    let p = env.arena.position();
    let group = s.heads / s.kv_heads;
    let scale = (s.head_dim as f32).sqrt().recip();
    let kv = &*env.kv;
    let (out, q, scores) = env.arena.triple(s.out, s.q, Buf::Scores);
    for h in 0..s.heads {
        let g = h / group;
        let qh = &q[h * s.head_dim..(h + 1) * s.head_dim];
        let row = &mut scores[..p + 1];
        for (j, sc) in row.iter_mut().enumerate() {
            *sc = dot(qh, kv.k_at(s.layer, j, g)) * scale;
        }
        softmax_inplace(row);
        accumulate_values(&mut out[h * s.head_dim..(h + 1) * s.head_dim], row, kv, s.layer, g);
    }
    Ok(())
}

fn gelu_impl(args: &OpArgs, env: &mut ExecEnv<'_>, f: fn(f32) -> f32) -> KResult {
    let OpArgs::Gelu {
        input,
        out,
        rows,
        width,
    } = *args
    else {
        return Err(wrong_args());
    };
    let (iw, ow) = (env.arena.width(input), env.arena.width(out));
    let (x, y) = env.arena.pair(input, out);
    for r in 0..rows {
        for c in 0..width {
            y[r * ow + c] = f(x[r * iw + c]);
        }
    }
    Ok(())
}

pub fn gelu_tanh(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    gelu_impl(args, env, gelu_tanh_scalar)
}

pub fn gelu_erf(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    gelu_impl(args, env, gelu_erf_scalar)
}

pub fn add_elementwise(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let OpArgs::Add {
        acc,
        other,
        rows,
        width,
    } = *args
    else {
        return Err(wrong_args());
    };
    let (aw, bw) = (env.arena.width(acc), env.arena.width(other));
    let (b, a) = env.arena.pair(other, acc);
    for r in 0..rows {
        for c in 0..width {
            a[r * aw + c] += b[r * bw + c];
        }
    }
    Ok(())
}

pub fn copy_rows(args: &OpArgs, _: &ParamMap, env: &mut ExecEnv<'_>) -> KResult {
    let OpArgs::CopyCols {
        src,
        dst,
        rows,
        width,
        dst_col,
    } = *args
    else {
        return Err(wrong_args());
    };
    let (sw, dw) = (env.arena.width(src), env.arena.width(dst));
    let (s, d) = env.arena.pair(src, dst);
    for r in 0..rows {
        d[r * dw + dst_col..r * dw + dst_col + width].copy_from_slice(&s[r * sw..r * sw + width]);
    }
    Ok(())
}

fn tile_space() -> Vec<ParamMap> {
    [4u64, 8, 16, 32, 64]
        .into_iter()
        .map(|t| ParamMap::from([("tile".to_owned(), json!(t))]))
        .collect()
}

pub fn register_builtin_kernels(reg: &mut KernelRegistry) -> Result<()> {
    use OpKind::*;
    let decode_only = [Stage::Decode];
    let impls = vec![
        KernelImpl::new("linear.naive", Linear, linear_naive).describe("row-major dot product per output"),
        KernelImpl::new("linear.blocked", Linear, linear_blocked)
            .param(ParamSpec {
                name: "tile",
                default: DEFAULT_TILE,
                min: 1,
                max: 4096,
                description: "square tile edge over output and input features",
            })
            .tuning_space(tile_space())
            .describe("output/input tiled schedule"),
        KernelImpl::new("linear.transposed_b", Linear, linear_transposed_b)
            .describe("input-outer schedule over a column-read weight"),
        KernelImpl::new("attention.prefill_masked", Attention, attention_prefill_masked)
            .describe("causal attention over a block of queries with a finite mask constant"),
        KernelImpl::new("attention.decode_cached", Attention, attention_decode_cached)
            .stages(&decode_only)
            .describe("single-query attention over cached keys"),
        KernelImpl::new("rope.fused", Rope, rope_fused).describe("pairwise rotation"),
        KernelImpl::new("rope.decomposed", Rope, rope_decomposed)
            .describe("rotation via slice, negate and concat of half heads"),
        KernelImpl::new("gelu.tanh", Gelu, gelu_tanh)
            .semantics("gelu_tanh")
            .describe("tanh approximation"),
        KernelImpl::new("gelu.erf", Gelu, gelu_erf)
            .semantics("gelu_erf")
            .describe("exact erf form"),
        KernelImpl::new("rmsnorm.ref", Rmsnorm, rmsnorm_ref),
        KernelImpl::new("kv_update.append", KvUpdate, kv_update_append)
            .describe("appends K/V rows at the current cache length"),
        KernelImpl::new("embedding.gather", Embedding, embedding_gather),
        KernelImpl::new("add.elementwise", Add, add_elementwise),
        KernelImpl::new("copy.rows", Copy, copy_rows),
    ];
    for k in impls {
        reg.register(k)?;
    }
    Ok(())
}
