//! Reparameterization through covering maps.
//!
//! Latent spaces with non-trivial topology (circle, torus, Klein bottle) are
//! reached by pushing Gaussians on the Euclidean cover forward through a
//! quotient map. This crate provides the covering arithmetic, the wrapped
//! (pushforward) densities and their KL bound, a small reverse-mode autodiff
//! engine with Adam, the VAE family built on it, dataset generators, and a
//! Vietoris-Rips persistent homology engine over prime fields used to check
//! the topology a trained model has learned.

pub mod ablation;
pub mod autodiff;
pub mod covering;
pub mod data;
pub mod density;
pub mod error;
pub mod exec;
pub mod tda;
pub mod vae;

pub use error::{Error, Result};
