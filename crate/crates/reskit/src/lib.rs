//! Analysis toolkit for hanger-coupled superconducting microwave resonators.
//!
//! The crate covers the full chain from raw complex transmission traces to
//! derived material quantities:
//!
//! * [`numcore`] — nonlinear least squares, origin regression, smoothing,
//!   Student-t sampling.
//! * [`sigmodel`] — forward transmission models (linear and kinetic-inductance
//!   nonlinear) and synthetic trace generation.
//! * [`respipe`] — the staged fitting pipeline: delay removal, circle fit,
//!   phase unwrap/fit, impedance-mismatch correction, direct complex fit.
//! * [`powersweep`] — photon-number conversion, TLS saturation fits, power-law
//!   fits and loss budgets over a power sweep.
//! * [`nonlin`] — stored energy, fractional frequency shift, scaling-energy
//!   extraction with parametric bootstrap uncertainty.
//! * [`kinetic`] — kinetic-inductance fraction from measured vs designed
//!   frequencies.
//! * [`xrd`] — pseudo-Voigt peak fitting, Bragg spacings, lattice parameters
//!   and out-of-plane strain.

pub mod kinetic;
pub mod nonlin;
pub mod numcore;
pub mod phys;
pub mod powersweep;
pub mod respipe;
pub mod sigmodel;
pub mod xrd;
