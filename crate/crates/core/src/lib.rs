//! Periodic orbits of the circular restricted three-body problem and Hill's
//! problem, computed in Moser-regularized coordinates.
//!
//! The crate provides the unregularized Hamiltonian models and their vector
//! fields ([`models`]), Dirac-constrained phase spaces ([`constrained`]), the
//! Moser transform and the regularized Hamiltonian on T*S^3 ([`moser`]),
//! high-accuracy propagation with variational equations and section events
//! ([`propagate`]), Newton differential correction of periodic orbits
//! ([`correct`]), vertical collision orbit seeds and the Hill-to-CR3BP
//! perturbation analysis ([`seeds`]), Floquet and Conley-Zehnder stability
//! analysis ([`stability`]), and predictor-corrector continuation of orbit
//! families ([`continuation`]).

pub mod constrained;
pub mod continuation;
pub mod correct;
pub mod error;
pub mod models;
pub mod moser;
pub mod ode;
pub mod propagate;
pub mod seeds;
pub mod stability;

pub use continuation::{Branch, BranchEntry, ContinuationConfig, Termination};
pub use correct::{CorrectionResult, PeriodicOrbit, RegOrbit, UnregOrbit};
pub use error::{Error, Result};
pub use models::{EnergyLevel, ModelKind, ModelSpec, PhaseState6, SymmetryKind};
pub use moser::{RegModel, RegState8};
pub use propagate::{CrossingDirection, SectionSpec};
pub use stability::{BifurcationEvent, BifurcationKind, CzResult, FloquetSpectrum, PairClass};
