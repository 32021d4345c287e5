//! The reference decoder-only transformer.

pub mod forward;
pub mod ops;

pub use forward::{
    emit_graph, forward_decode_step, forward_pass, forward_prefill, graph_len, LogitRows, ModelRunner, OpNode, Pass,
    PassOutput, OPS_PER_LAYER,
};
pub use ops::{apply_rope, argmax, gelu, masked_softmax, rmsnorm, RopeVariant, V_SAFE};
