//! 2D electrical impedance tomography toolkit.
//!
//! The crate covers the full reconstruction pipeline on a disc domain:
//! complete-electrode-model FEM forward simulation (`mesh`, `fem`), exact
//! adjoint-state derivatives up to the true Hessian (`adjoint`), Neumann
//! functions for the disc, free space and general FEM domains (`neumann`),
//! polarization-tensor based approximate Hessian diagonals (`ptensor`),
//! quasi-Newton and Gauss-Newton reconstruction engines (`optim`), and an
//! experiment harness with phantoms, noise and CSV/SVG artifacts (`lab`).

pub mod adjoint;
pub mod error;
pub mod fem;
pub mod lab;
pub mod mesh;
pub mod neumann;
pub mod numerics;
pub mod optim;
pub mod ptensor;

pub use error::{Error, Result};
