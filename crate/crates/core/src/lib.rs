pub mod approximators;
pub mod error;
pub mod fem;
pub mod field;
pub mod genmodel;
pub mod inference;
pub mod io;
pub mod predict;
pub mod rng;
pub mod vobs;

pub use error::{Error, Result};
