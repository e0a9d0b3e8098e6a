//! Boundary-integral spectra of the scalar and Maxwell Neumann–Poincaré operators on
//! smooth star-shaped surfaces, surface plasmon modes and their localization.
//!
//! The crate is organised bottom-up:
//!
//! * [`specfun`] — spherical harmonics, spherical Bessel/Hankel functions, Gauss rules;
//! * [`surface`] — star-shaped surface grids, harmonic transforms, surface calculus;
//! * [`potentials`] — single-layer and Neumann–Poincaré operators, their vector
//!   analogues through scalar reductions, frequency corrections, off-surface fields;
//! * [`spectral`] — symmetrized eigensolves, Gram forms, Calderón checks;
//! * [`mie`] — closed-form sphere oracles and multipole fields;
//! * [`plasmon`] — plasmon modes, field evaluation, localization statistics;
//! * [`scatter`] — the scaled scattering system, dipole sources and sweeps;
//! * [`cli`] — the batch command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN.

pub mod cli;
pub mod error;
pub mod mie;
pub mod plasmon;
pub mod potentials;
pub mod scatter;
pub mod spectral;
pub mod specfun;
pub mod surface;

pub use error::{Error, Result};
pub use specfun::C64;
