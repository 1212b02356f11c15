//! Spectral space–time Galerkin solver for a regularized, time-periodic
//! compressible Navier–Stokes–Fourier system on a box, together with
//! auditors that check the discrete balance identities and the exponent
//! arithmetic behind the a-priori estimates.
//!
//! Layout:
//! - [`constitutive`]: pressure, energy, entropy and transport laws.
//! - [`admissibility`]: exponent windows and the estimate chain.
//! - [`kirchhoff`]: the log-temperature Kirchhoff transform and its inverse.
//! - [`discretization`]: tensor trigonometric bases, quadrature, fields.
//! - [`bogovskii`]: discrete right inverse of the divergence.
//! - [`solvers`]: linear sub-solvers and the damped fixed-point driver.
//! - [`auditors`]: mass/energy/entropy residuals and estimate norms.
//! - [`cli_io`]: run configuration, reports, checkpoints and sweeps.

pub mod admissibility;
pub mod auditors;
pub mod bogovskii;
pub mod cli_io;
pub mod constitutive;
pub mod discretization;
pub mod error;
pub mod kirchhoff;
pub mod solvers;

pub use error::{Error, Result};
