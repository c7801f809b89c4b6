pub mod error;
pub mod critic;
pub mod envs;
pub mod geometry;
pub mod nn;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
