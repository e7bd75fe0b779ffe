pub mod cli;
pub mod error;
pub mod evaluation;
pub mod fit;
pub mod penalty;
pub mod portfolio;
pub mod spline;
pub mod tweedie;

pub use error::{Error, Result};
