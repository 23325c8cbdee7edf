//! Variational data assimilation where the cost contains a Young integral
//! against a rough observation path.
//!
//! The crate is organised bottom-up:
//!
//! - [`roughpath`]: time grids, sampled paths, exact grid p-variation, Young
//!   sums, seeded Wiener sampling and observation paths.
//! - [`dynamics`]: the controlled state equation `x' = f(t,x) + g(t,x) u`,
//!   Lorenz'63 / Lorenz'96 / linear models and RK4 integrators.
//! - [`cost`]: running costs, the cost functional and its by-parts
//!   cross-evaluator, minimum-energy and Onsager–Machlup families.
//! - [`adjoint`]: costate recursion, Hamiltonian, control gradient,
//!   maximum-principle residual and the duality identity.
//! - [`optimizer`]: control sets and projected-gradient minimisation.
//! - [`hamiltonian_bvp`]: the state/costate boundary-value problem, single
//!   shooting and value-function probes.
//! - [`oracle`]: slow reference computations (brute-force p-variation, scalar
//!   Riccati) used by the diagnostic suites.

pub mod adjoint;
pub mod cost;
pub mod dynamics;
mod error;
pub mod hamiltonian_bvp;
pub mod optimizer;
pub mod oracle;
pub mod roughpath;

pub use error::{Error, Result};

pub use adjoint::{Costate, OptimalTriple};
pub use cost::Cost;
pub use dynamics::{ControlPath, Model};
pub use optimizer::{AssimilationResult, ControlSet, OptimizerConfig, Status};
pub use roughpath::{ObservationPath, SampledPath, TimeGrid};

/// Everything a single assimilation run needs besides the initial state.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a dyn Model,
    pub cost: &'a dyn Cost,
    pub eta: &'a SampledPath,
    pub control_set: &'a ControlSet,
}

impl<'a> Problem<'a> {
    pub fn new(
        model: &'a dyn Model,
        cost: &'a dyn Cost,
        eta: &'a SampledPath,
        control_set: &'a ControlSet,
    ) -> Self {
        Self {
            model,
            cost,
            eta,
            control_set,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.eta.grid()
    }
}
