//! Simulation and Hamilton-Jacobi verification for simple hybrid Hamiltonian
//! systems: conservative, externally forced, and nonholonomically constrained
//! flows interrupted by impact maps.
//!
//! The crate is organized bottom-up:
//!
//! - [`phase`]: phase points and the three vector fields in Darboux coordinates.
//! - [`integrate`]: fixed-step and step-doubling RK4 with cubic Hermite dense output.
//! - [`hybrid`]: guards, resets, event location, and hybrid trajectories.
//! - [`verify`]: residual checks for candidate Hamilton-Jacobi solution families.
//! - [`reconstruct`]: rebuilding hybrid trajectories from complete solutions.
//! - [`scenarios`]: the shipped example systems with their families and oracles.
//! - [`export`]: CSV/JSON output with lossless 17-digit decimals.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod export;
pub mod hybrid;
pub mod integrate;
pub mod linalg;
pub mod phase;
pub mod reconstruct;
pub mod sampling;
pub mod scenarios;
pub mod verify;

pub use error::{Error, Result};
pub use phase::{DynamicsModel, FieldKind, Matrix, PhasePoint, Vector};
