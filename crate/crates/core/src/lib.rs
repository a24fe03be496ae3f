//! Sensitivity relations for Mayer optimal control problems with support-function
//! Hamiltonians: characteristics, Riccati/variational flows, a grid value-function oracle
//! and verification of how first- and second-order information propagates along arcs.

pub mod characteristics;
pub mod error;
pub mod field;
pub mod hamiltonian;
pub mod hjb;
pub mod linalg;
pub mod ode;
pub mod report;
pub mod riccati;
pub mod scenario;
pub mod sensitivity;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use report::{ResidualNode, Verdict, VerificationReport};
