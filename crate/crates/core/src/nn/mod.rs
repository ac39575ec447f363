//! Minimal channels-last network primitives with explicit backward passes.

pub mod attention;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;

pub use attention::{AttentionCache, AttnMode, TemporalAttention};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Grads, Init, Param, ParamId, ParamStore};
pub use real::Real;
