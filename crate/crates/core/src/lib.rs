//! Density-matrix and black-box measurement simulation.
//!
//! The crate models quantum states (pure, improper and proper mixtures),
//! measuring devices as ancilla dilations with pointer readout, and the
//! thought experiments showing that every outcome statistic is an affine
//! function of the density matrix. The [`suites`] module bundles the checks
//! into named, seeded verification suites.

pub mod apparatus;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod manifest;
pub mod reconstruction;
pub mod seeding;
pub mod states;
pub mod suites;

pub use error::{Error, Result};
