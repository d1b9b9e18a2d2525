//! Coordinated diffusion core.
//!
//! Single-agent score models trained by denoising score matching, composed at
//! sampling time into a joint multi-agent policy through a gradient-free,
//! cost-weighted guidance score. Everything here is pure computation over
//! `alloc` collections; file formats, configuration and the command line live
//! in the `codi` companion crate.
//!
//! Module map:
//! - [`diffusion`]: perturbation kernel, noise-time distribution, reverse-time SDE.
//! - [`nn`] and [`score_net`]: in-house MLP with backprop, DSM training.
//! - [`composition`]: product-of-marginals score, Tweedie posterior, guidance.
//! - [`baselines`]: classifier guidance, DPMD, SDAC and EXPO fine-tuning.
//! - [`env`]: planar two-arm hand-off surrogate and its cost function.
//! - [`harness`]: demonstrations, closed-loop episodes, metrics.
//! - [`analytics`]: exact discrete and Gaussian oracles.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analytics;
pub mod baselines;
pub mod composition;
pub mod diffusion;
pub mod env;
mod error;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod score_net;
pub mod stats;

pub use error::{Error, Result};
