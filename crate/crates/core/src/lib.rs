//! Core engine for differentiable architecture search with multiple mutually
//! exclusive single-path sub-graphs.
//!
//! The crate is `no_std` (it only needs `alloc`). Everything that touches the
//! file system, the clock or the command line lives in the `msgdas` crate.
//!
//! Layout:
//! - [`autograd`]: a small reverse-mode tape with the primitives the search
//!   space and the losses need.
//! - [`sampler`]: Gumbel top-K sampling without replacement with
//!   straight-through coefficients.
//! - [`searchspace`]: operations, cell topology, the network and genotype
//!   derivation.
//! - [`regularizers`]: DropBlock on skip-connect outputs and super-net
//!   guidance.
//! - [`optim`] and [`engine`]: the alternating weight / architecture loop.
#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autograd;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod regularizers;
pub mod sampler;
pub mod scalar;
pub mod searchspace;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;
