pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod model;
pub mod norms;
pub mod paths;
pub mod regress;
pub mod selftest;
pub mod solver;

pub use error::{Error, Result};
pub use field::Field;
