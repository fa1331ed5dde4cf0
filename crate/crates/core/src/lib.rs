//! Distributional control of ensemble systems.
//!
//! An ensemble `dx/dt(t, beta) = F(t, beta, x, u)` is steered by a common control `u(t)` so that
//! its output measure follows a Wasserstein geodesic. The measure is represented through moment
//! sequences, whose truncated dynamics are linear for polynomial ensembles.

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod measure;
pub mod moment;
pub mod moment_system;
pub mod ode;
pub mod presets;
pub mod tracking;
pub mod transport;

pub use error::{Error, Result};
