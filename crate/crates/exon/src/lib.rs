//! Semi-supervised VAE with user-customized Gaussian-mixture priors, a
//! combined ELBO / classification / soft-label-consistency objective, and a
//! V-nat explainability suite for the trained latent space.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`priors`] — construction and evaluation of the designed mixture prior.
//! - [`autodiff`] — a small tape-based reverse-mode engine on `f64` arrays.
//! - [`networks`] — encoder / decoder / classifier definitions and checkpoints.
//! - [`stochastic`] — Gumbel-Max selection, reparameterization, mixup pairs,
//!   and dataset augmentation.
//! - [`objective`] — every loss term and the schedule weights.
//! - [`trainer`] — optimizer, epoch loop, metrics log, checkpointing.
//! - [`analysis`] — V-nat, activated subspaces, bound certificates, metrics,
//!   interpolation / perturbation / grid studies.
//! - [`data`] — dataset ingestion and labeled/unlabeled splitting.
//! - [`config`] — run configuration files and overrides.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod networks;
pub mod objective;
pub mod priors;
pub mod stochastic;
pub mod trainer;

pub use error::{ExonError, Result};
