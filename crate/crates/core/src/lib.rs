//! Variational autoencoder with a nonparametric auxiliary embedding.
//!
//! Alongside the usual latent space Z, an npvae learns a low-dimensional
//! space X in which nearby observations have similar posterior means. Points
//! in X can be decoded through stored reference anchors, which gives smooth
//! sampling and interpolation on a 2-D grid.

pub mod artifacts;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod npvae;
pub mod numcore;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelKind};
pub use numcore::{Matrix, Rng};
