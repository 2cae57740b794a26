//! Pilot-wave trajectory simulation and quantum-relaxation analysis for two
//! linearly coupled one-dimensional harmonic oscillators.

pub mod diagnostics;
pub mod dynamics;
pub mod eigenbasis;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod fitting;
pub mod metrics;
pub mod ode;
pub mod wavefunction;

pub use error::{Error, Result};
