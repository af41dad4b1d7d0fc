//! Finite-element laboratory for a distributed elliptic optimal control
//! problem with mixed Dirichlet/Neumann boundary conditions and its Robin
//! penalisation.

pub mod assembly;
pub mod cli;
pub mod constants_bounds;
pub mod convergence_lab;
pub mod error;
pub mod linsolve;
pub mod mesh;
pub mod optimal_control;
pub mod pde_solvers;
pub mod sparse;

pub use error::{Error, Result};
