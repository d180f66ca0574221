//! Latent-ODE autoencoders for dynamics on the unit circle.
//!
//! The crate trains an encoder `E: R² -> R`, a decoder `D: R -> R²` and a
//! latent vector field `h: R -> R` so that `D ∘ Φ_h ∘ E` reproduces the flow of
//! `f(x) = (-2 x₁ x₂², 2 x₁² x₂)` on the circle, and ships numerical checks of
//! the covering-space conjugacy and of the unavoidable round-trip defect.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod loss;
pub mod maps;
pub mod nn;
pub mod optim;
pub mod par;
pub mod seeds;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
