//! Quench dynamics of a three-dimensional chiral topological band model on a
//! two-qubit register.
//!
//! The model is a four-band Hamiltonian H(k) = Σ_j h_j(k) γ_j built from five
//! mutually anticommuting gamma matrices. Everything downstream — unitary
//! evolution, time-averaged polarizations, band-inversion-surface (BIS)
//! reconstruction, dynamical winding numbers, topological charges, and the
//! photon shot-noise error model — lives in the modules below.
//!
//! - [`model`]: momentum-space coefficient vector, Hamiltonian assembly,
//!   chiral symmetry checks and the equilibrium phase diagram.
//! - [`dynamics`]: exact quench evolution, time-averaged and windowed
//!   polarizations, dephasing.
//! - [`prep`]: pre-quench Hamiltonians, initial-state preparation pulses and
//!   the microwave/rf pulse compiler.
//! - [`bismesh`]: triangulated reconstruction of the BIS from the measured
//!   γ0 polarization field.
//! - [`invariants`]: dynamical winding number W on the BIS, its
//!   symmetry-breaking generalization W_SB, and the dynamical transition scan.
//! - [`charges`]: topological charges of the polarization texture and charge
//!   tracking under shallow quenches.
//! - [`noise`]: photon-count readout model and Monte Carlo error propagation.
//!
//! The `quench3d` binary (same workspace) strings these into end-to-end runs
//! with file outputs; this crate stays free of I/O beyond export helpers.

pub mod bismesh;
pub mod charges;
pub mod dynamics;
mod error;
pub mod gamma;
pub mod invariants;
pub mod model;
pub mod noise;
pub mod prep;
mod util;

pub use error::{Error, Result};

/// Crate version, for run manifests and provenance records.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
/// Dense 4x4 complex matrix (Hamiltonians, unitaries, observables).
pub type CMat4 = nalgebra::Matrix4<C64>;
/// Four-component complex state vector.
pub type CVec4 = nalgebra::Vector4<C64>;
