//! Numerical core for continuous spontaneous localization (CSL) collapse
//! models on a lattice.

pub mod creation_model;
pub mod csl_trajectories;
pub mod energy_stress;
pub mod error;
pub mod form_factor;
pub mod gravity_collapse;
pub mod hilbert;
pub mod lattice_noise;
pub mod master_equation;
pub mod ode;
pub mod quadrature;
pub mod stats;

pub use error::{Error, Result};
pub use lattice_noise::{CollapseParams, LatticeSpec, NoiseMeasure};
