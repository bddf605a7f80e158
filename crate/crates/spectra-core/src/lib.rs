//! Algorithmic core for illumination-invariant grape quality and yield mapping
//! from uncalibrated hyperspectral scans.
//!
//! Everything in this crate is pure computation over in-memory buffers: a
//! minimal reverse-mode tensor engine ([`tensor`]), Savitzky-Golay spectral
//! preprocessing ([`savgol`]), the domain-adversarial autoencoder ([`lisa`]),
//! chemometric baselines ([`baselines`]), evaluation metrics ([`metrics`]),
//! a synthetic multi-domain benchmark generator ([`synth`]), and the
//! sliding-window scan pipeline ([`pipeline`]). File formats, configuration
//! parsing, and the command-line interface live in the companion `spectra-cli`
//! crate.
//!
//! The crate is `no_std` (with `alloc`) so the numerical code stays free of
//! platform dependencies; transcendental float math goes through `libm`.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod hsi;
pub mod lisa;
pub mod metrics;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod savgol;
pub mod synth;
pub mod tensor;

pub use real::Real;
pub use rng::SeedRng;
