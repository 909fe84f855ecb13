//! Numerical toolkit for time-dependent perturbations of (near-)integrable
//! Hamiltonians whose forcing decays polynomially in time.
//!
//! The library computes families of positive/negative asymptotic invariant
//! tori by a chord (frozen-derivative) iteration built on an explicit
//! characteristic-integral solver for the transport equation
//! `omega . d_theta kappa + d_t kappa = g`, and glues the two one-sided
//! families at `t = 0` into orbits that are quasiperiodic in both time
//! limits. Everything works on truncated Fourier series in the angles and
//! geometric one-sided time grids with declared decay tails, so that norms,
//! residuals and tail contributions are all computable and checkable.

pub mod biasymptotic;
pub mod decay_norms;
pub mod error;
pub mod flow;
pub mod hamiltonian;
pub mod homological;
pub mod torus_fourier;
pub mod torus_solver;

pub use error::KamError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, KamError>;
