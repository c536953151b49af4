//! HDR exposure-stack tooling built around a latent-space exposure head.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`imageio`]: PFM radiance maps and binary PPM images, bit-exact.
//! - [`scenegen`]: seeded procedural HDR scenes for hermetic train/test data.
//! - [`bracket`]: LDR exposure-stack synthesis and clipping statistics.
//! - [`merge`]: weighted log-domain radiance reconstruction from a bracket,
//!   plus the optional saturation-mask blend with the input image.
//! - [`latent`]: lossless space-to-depth latent codec with an emulated
//!   near-deterministic Gaussian posterior.
//! - [`neural`]: dense f64 tensor kernels with hand-written backward passes,
//!   Adam, and a finite-difference gradient checker.
//! - [`head`]: Fourier EV embedding, conditioning MLP, and the
//!   FiLM-conditioned residual U-Net exposure head with its training loop.
//! - [`metrics`]: dynamic range in stops, latent trajectory analysis, and
//!   end-to-end LDR-to-HDR evaluation.

pub mod bracket;
mod error;
pub mod head;
pub mod imageio;
pub mod latent;
pub mod merge;
pub mod metrics;
pub mod neural;
pub mod rng;
pub mod scenegen;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
