//! Finite-dimensional Riccati feedback stabilization of a conserved
//! phase-field (Cahn–Hilliard type) system on `Ω = (0, L)`.
//!
//! The pipeline runs stationary state → linearization `𝒜` → actuator and
//! controllability → Riccati gain → closed-loop simulation.

pub mod actuator;
pub mod error;
pub mod linearization;
pub mod lqr;
pub mod lyapunov;
pub mod pipeline;
pub mod quadrature;
pub mod sim;
pub mod spectral;
pub mod stationary;

pub use error::{Error, Result};
