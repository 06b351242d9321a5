//! Desk-scale simulator for a stochastically forced fluid-structure
//! interaction problem: 2D incompressible channel flow coupled to an elastic
//! top boundary, discretized by a Lie operator-splitting scheme on a fixed
//! reference domain with pathwise ALE maps, a divergence/boundary penalty,
//! and truncated Q-Wiener multiplicative forcing.
//!
//! The crate is organized along the scheme's moving parts:
//! - [`mesh`]: reference meshes, shape functions and mass operators;
//! - [`ale`]: pathwise geometry (maps, Jacobians, transformed operators,
//!   admissibility gauges);
//! - [`structure`]: the implicit elastodynamics half-step and its exact
//!   energy audit;
//! - [`fluid`]: the penalized coupled velocity step and its audit;
//! - [`noise`]: truncated Q-Wiener increments and the Hilbert-Schmidt noise
//!   coefficient;
//! - [`driver`]: the time-marching loop with cutoff/freeze bookkeeping,
//!   interpolant views and the energy ledger;
//! - [`harness`]: seeded Monte Carlo ensembles and parameter studies.

pub mod ale;
pub mod driver;
pub mod error;
pub mod fluid;
pub mod harness;
pub mod linalg;
pub mod mesh;
pub mod noise;
pub mod oracle;
pub mod quadrature;
pub mod structure;

pub use ale::{AdmissibilityReport, AleFrame, PhiMap};
pub use driver::{EnergyLedger, Interpolants, SchemeConfig, Trajectory};
pub use error::{CoreError, Result};
pub use fluid::{FluidStepResult, FluidSystem};
pub use harness::{EnsembleReport, EnsembleSpec};
pub use mesh::{BoundaryTag, FluidField, GammaConstraint, RefMesh, StructureField, StructureMesh};
pub use noise::{NoiseModel, WienerIncrement, WienerSpec};
pub use structure::{ElasticOperator, StructureStepResult, StructureStepper};
