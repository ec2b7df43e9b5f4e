//! Training-free progressive video editing, at desk scale.
//!
//! Noise schedules with injected per-step noise, DDPM-latent inversion,
//! streaming attention with on-the-fly map replacement, a toy diffusion
//! transformer plus an analytic mixture oracle, the preservation/progression
//! editing pipeline, a planar render-edit-reconstruct loop and a synthetic
//! shapes dataset.

pub mod alloc_meter;
pub mod attention;
pub mod config;
pub mod denoiser;
pub mod editing;
pub mod error;
pub mod inversion;
pub mod rng;
pub mod rer;
pub mod schedulers;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{Purpose, RngStream};
pub use tensor::VideoTensor;

#[cfg(test)]
#[global_allocator]
static ALLOC: alloc_meter::CountingAllocator = alloc_meter::CountingAllocator;
