//! Universal attention matching for universal domain adaptation.

pub mod attention;
pub mod cam;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod separation;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};
pub use numeric::{Matrix, Rng, Vector};
pub use sparse::{Dictionary, ResidualVector, SparseCode};
