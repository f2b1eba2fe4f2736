//! Constructive machinery for diffusion geometry in convex nearly integrable
//! Hamiltonian systems with three degrees of freedom.
//!
//! The crate computes, at desk scale:
//!
//! * resonance circles on an energy level and their double-resonance points,
//!   with the Dirichlet disc covering that controls all admitted periods;
//! * the full reduction to a planar mechanical normal form at a double
//!   resonance (averaging, homological equation, shear, rescaling, energetic
//!   reduction) with quantified remainder reports;
//! * minimal periodic orbits, Floquet multipliers, bifurcation energies,
//!   alpha/beta functions and cohomology channels of the averaged system,
//!   embedded back into `H^1(T^3)`;
//! * quantitative deviation bounds for Aubry sets under perturbation;
//! * discrete weak-KAM solutions, elementary solutions on the double cover,
//!   barrier functions and their argmin diagnostics.
//!
//! Each capability has a runnable example under `examples/`; the `resweb`
//! binary drives the same code as a staged pipeline from a TOML config.

pub mod averaged;
pub mod estimates;
pub mod fourier;
pub mod lattice;
pub mod model;
pub mod normalform;
pub mod pipeline;
pub mod poly;
pub mod resonance;
pub mod weakkam;

pub use fourier::{Fourier2, FourierSeries3};
pub use model::{ConvexHamiltonian, HKind, NearlyIntegrableSystem};
pub use poly::Poly;
