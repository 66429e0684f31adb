//! Koopman eigenfunction based Lyapunov certificates.
//!
//! The pipeline runs from trajectory data to a verified forward-invariant
//! sublevel set:
//!
//! 1. [`systems`] integrates polynomial vector fields and samples snapshot pairs.
//! 2. [`dictionary`] (monomials) or [`neural`] (encoder/decoder) lift states.
//! 3. [`koopman`] fits a Koopman matrix and extracts stable eigenfunctions.
//! 4. [`lyapunov`] turns them into a linear family of candidate functions.
//! 5. [`polytope`] prunes the family with sampled constraints and linear programs.
//! 6. [`verify`] maximizes the invariance residual and simulates trajectories.
//!
//! With the default `parallel` feature, batch evaluation runs on rayon; without
//! it every batch loop runs sequentially with identical results.

pub mod dictionary;
pub mod error;
pub mod io;
pub mod koopman;
pub mod lp;
pub mod lyapunov;
pub mod neural;
pub mod par;
pub mod poly;
pub mod polytope;
pub mod systems;
pub mod verify;

mod eigen;

pub use error::{Error, Result};
