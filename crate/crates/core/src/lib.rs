//! Penalized Buckley-James estimation for clustered, stratified-sampled
//! right-censored data under an accelerated failure time model.

pub mod cli;
pub mod correlation;
pub mod data;
pub mod design;
pub mod error;
pub mod io;
pub mod km;
pub mod linalg;
pub mod par;
pub mod simulation;
pub mod solver;
pub mod tuning;
pub mod variance;

pub use error::{Error, Result};
