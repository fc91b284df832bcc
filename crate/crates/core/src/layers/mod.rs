//! Rotary position embeddings and grouped-query attention.

mod attention;
mod rope;

pub use attention::{
    attention_on_tape, attention_weights, chunked_attention, gqa_attention, AttnConfig,
    HybridPattern,
};
pub use rope::{rope_1d_apply, rope_2d_apply, RopeMode, RopeParams, RopeTable, DEFAULT_THETA};

use crate::numcore::NumError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("RoPE mode mismatch: expected {expected:?}, got {got:?}")]
    ModeMismatch { expected: RopeMode, got: RopeMode },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{n_heads} query heads are not divisible by {n_kv_heads} kv heads")]
    IndivisibleHeads { n_heads: usize, n_kv_heads: usize },
    #[error("query {row} of head {head} has no visible key")]
    EmptyAttentionRow { head: usize, row: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Num(#[from] NumError),
}
