//! Numerical laboratory for diffuse-interface energies and their sharp-interface limits.

pub mod domain;
pub mod energies;
pub mod experiments;
pub mod error;
pub mod fields;
pub mod green;
pub mod io;
pub mod critical;
pub mod linalg;
pub mod sharp;
pub mod spectra;
pub mod variations;

pub use error::{Error, Result};
