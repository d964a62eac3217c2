//! Zero-shot image-conditioned video sampling on top of a frozen clip
//! diffusion model.
//!
//! A clip model generates `K + 1` latent frames at once. The [`controller`]
//! turns it into an autoregressive frame generator: the first `K` slots are
//! pinned to a FIFO queue of already-known latents (the start image repeated
//! `K` times, then every synthesized frame slid in), terminal noise is
//! obtained by forward-noising that queue, and each reverse step can be
//! resampled several times to harmonize the new slot with its context.
//!
//! Everything runs at desk scale: a deterministic pooling [`codec`], an exact
//! Gaussian-world denoiser that serves as the test oracle, a micro
//! spatio-temporal network trainable on CPU, synthetic data in [`toyworld`],
//! and Fréchet-style metrics in [`eval`].

pub mod codec;
pub mod controller;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod toyworld;

pub use error::{Error, Result};
pub use tensor::{FrameShape, LatentClip, LatentFrame};
