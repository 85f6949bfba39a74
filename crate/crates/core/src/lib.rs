//! Joint audio-video latent diffusion at desk scale.
//!
//! Two toy denoiser branches (video and audio) are trained jointly on
//! synthetic paired latents and sampled with a shared global timestep that
//! maps to per-modality local timesteps through a power-law adjustment.
//! Cross-modal conditioning is injected either as temporally-interpolated
//! positional encodings (CMC-PE) or through a pooled cross-attention
//! baseline. Temporal alignment of generated pairs is scored with both the
//! official and the precision/recall forms of AV-Align.

pub mod cli;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod jointmodel;
pub mod metrics;
pub mod numerics;
pub mod schedule;
mod wire;

pub use error::{Error, Result};
