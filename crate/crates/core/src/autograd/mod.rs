//! Reverse-mode differentiation over [`Tensor`](crate::Tensor) values.

pub mod kernels;
mod tape;

pub use kernels::{ConvParams, PoolKind};
pub use tape::{Tape, Var};
