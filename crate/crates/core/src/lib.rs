//! Spatial SIR epidemics: exact simulation, Gaussian moment closure, low-rank
//! tensor emulators of the closure moments, and emulator-based Bayesian
//! inference on noisy new-infection counts.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::manual_is_multiple_of)]

pub mod closure;
pub mod emulator;
pub mod error;
pub mod inference;
pub mod model;
pub mod ode;
pub mod ssa;
pub mod tensor;

pub use closure::{MomentState, MomentTrajectory};
pub use error::{Error, Result};
pub use model::{BetaField, BetaModel, EpidemicState, Lattice, Parameterization, Theta};
pub use ode::Tolerances;
