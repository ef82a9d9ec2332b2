//! Diffusion purification and randomized-smoothing certification on
//! analytic data distributions.
//!
//! Every distribution here has an exact score, so the purifiers can be
//! compared without estimation error:
//!
//! - [`distributions`]: Dirac/Gaussian mixtures with exact diffused
//!   densities, scores and posterior means under the `x_t = x_0 + t z` kernel.
//! - [`diffusion`]: forward perturbation, the probability-flow ODE and the
//!   reverse SDE.
//! - [`timegrid`]: the Karras time grid and noise-level to timestep selection.
//! - [`nn`]: a small MLP with hand-written backprop, Adam, EMA and the
//!   consistency-model parameterization.
//! - [`purifiers`]: one-step posterior mean, PF-ODE, reverse SDE, and
//!   consistency models behind one [`purifiers::Purify`] trait.
//! - [`training`]: consistency distillation and consistency fine-tuning.
//! - [`smoothing`]: Monte Carlo prediction/certification and exact binomial
//!   statistics.
//! - [`transport`]: Monte Carlo transport estimates and the Markov bound on
//!   distance exceedance.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod distributions;
pub mod error;
pub mod nn;
pub mod purifiers;
pub mod rng;
pub mod smoothing;
pub mod timegrid;
pub mod training;
pub mod transport;

pub use error::{Error, Result};

/// A point in data space.
pub type Point = Vec<f64>;
