//! Solver library for the extended Bogomolny equations on R^2 x R^+ with a
//! nilpotent Higgs field phi = [[0, P(z)], [0, 0]].

pub mod analysis;
pub mod approx;
pub mod error;
pub mod mat2;
pub mod grid;
pub mod krylov;
pub mod model;
pub mod poly;
pub mod solver;

pub use error::{EbeError, Result};
pub use mat2::{c, C64, Mat2};
pub use poly::{charges, ChargePoint, ChargeSet, HolomorphicData, Polynomial};
