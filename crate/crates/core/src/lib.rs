pub mod controller;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod nn;
pub mod search_space;
pub mod seed;
pub mod surrogate;
pub mod trainer;

pub use error::{Error, Result};
