//! Training-free protection of images against generative manipulation.
//!
//! The defense injects an adversarial perturbation into a deterministic
//! denoising trajectory instead of perturbing the pixels directly: the
//! image is inverted a few steps up the diffusion schedule, a guidance
//! gradient is added at chosen steps of the way back down, and the outer
//! loop balances attack strength against fidelity, with exact gradients
//! (white-box) or query-only estimates (black-box).
//!
//! Modules map onto the stages of that pipeline:
//!
//! - [`diffusion`]: schedule, deterministic sampler and its inversion.
//! - [`whitebox`] / [`blackbox`]: the two protection loops.
//! - [`models`]: toy manipulators, denoisers, the identity encoder, a
//!   serialized weights format, and a wire protocol for remote models.
//! - [`distortions`]: the robustness bank (JPEG, blurs, downscale) with
//!   sweeps and area-under-curve summaries.
//! - [`metrics`]: fidelity and defense-success measurement, reports.
//! - [`fixtures`]: deterministic synthetic face-like test images.
//! - [`pipeline`]: config files, PNG interchange, CLI commands.

pub mod blackbox;
pub mod diffusion;
pub mod distortions;
pub mod error;
pub(crate) mod filter;
pub mod fixtures;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod tensor;
pub mod whitebox;

pub use error::{Result, VeilError};
pub use tensor::Tensor;
