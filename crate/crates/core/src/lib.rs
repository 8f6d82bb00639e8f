//! Training-free, text-driven local image editing on top of a deterministic
//! DDIM sampler.
//!
//! The crate is `no_std` (with `alloc`) and contains only pure computation:
//!
//! - [`tensor`]: the small dense kernels everything else is built on.
//! - [`schedule`]: noise schedules, forward noising and DDIM encode/decode.
//! - [`oracle`]: closed-form Gaussian-mixture noise predictors used to check
//!   the sampler against known marginals.
//! - [`textcond`]: a deterministic hash-vocabulary text conditioner.
//! - [`denoiser`]: the 13-block toy U-Net with feature taps, feature
//!   injection and per-token cross-attention masking.
//! - [`blend`]: mask pyramids plus feature- and pixel-level blending.
//! - [`pipeline`]: the edit procedure tying all of the above together.
//!
//! File formats, the CLI and the HTTP job service live in the companion
//! `pfbdiff` crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod blend;
pub mod denoiser;
mod error;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod textcond;

pub use error::{Error, Result};
pub use tensor::Tensor;
