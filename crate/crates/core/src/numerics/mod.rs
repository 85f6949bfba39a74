//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Tensors are row-major `f32` buffers with an optional gradient record.
//! Operations build a dynamic computation record when any input requires
//! gradients; [`backward`] replays it in reverse. Reductions accumulate in
//! `f64` so that finite-difference oracles stay meaningful in `f32`.
//!
//! The API is single-thread-per-graph: one computation record must not be
//! mutated concurrently. All operations are deterministic given identical
//! inputs and seeds.

mod rng;
mod tensor;

pub use rng::Rng;
pub use tensor::{backward, no_grad, Tensor};
