//! Fokker-Planck operators of Lévy-driven SDEs on truncated grids.
//!
//! The forward operator is split as `L = A_r + I_r + J_r`: a local part, a
//! compensated small-jump part built from the local inverse flow of
//! `y ↦ y + p(y, z)`, and a large-jump part that exists only as the matrix
//! transpose of the discretized generator term `J_r*`.

pub mod error;
pub mod experiment;
pub mod grid;
pub mod inverse_flow;
pub mod mc_oracle;
pub mod model;
pub mod operators;
pub mod quadrature;
pub mod rng;
pub mod semigroup;
pub mod sparse;

pub use error::{Error, Result};
