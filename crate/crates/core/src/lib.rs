//! Frequency-domain score-based diffusion for multivariate time series,
//! accelerated by an error-feedback, event-driven KV cache.
//!
//! The crate is organized bottom-up:
//!
//! - [`spectral`] — unitary DFT, half-spectrum tokens, the φ/φ⁻¹ real
//!   coordinate charts and the Λ scaling weights.
//! - [`sde`] — VP noise schedule, closed-form perturbation kernel in
//!   φ-coordinates, mirrored Brownian increments, reverse Euler step.
//! - [`scorenet`] — a small pre-norm transformer score network over
//!   half-spectrum tokens with full and cache-assisted forward paths.
//! - [`cache`] — the event-driven recompute policy: event intensity, token
//!   drift, energy-weighted thresholds, probes and error feedback.
//! - [`sampler`] — reverse-SDE sampling drivers (baseline, cached, ablations)
//!   with paired RNG streams and per-step traces.
//! - [`train`] — denoising score matching with hand-rolled backprop, AdamW,
//!   warmup + cosine schedule, dataset standardization.
//! - [`eval`] — sliced/marginal Wasserstein metrics, spectral density
//!   comparison, wall-clock benchmark harness.
//! - [`synth`] — synthetic dataset generators (sinusoid mixtures, AR(1),
//!   square waves, point-mass).
//! - [`checkpoint`] — lossless binary parameter container.

pub mod cache;
pub mod checkpoint;
pub mod eval;
pub mod rng;
pub mod sampler;
pub mod scorenet;
pub mod sde;
pub mod spectral;
pub mod synth;
pub mod train;

pub use spectral::{HalfSpectrum, LambdaDiag, PhiVector, TimeSeriesSample};
