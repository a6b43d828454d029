pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod structure;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
