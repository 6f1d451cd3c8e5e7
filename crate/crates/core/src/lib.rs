pub mod cli;
pub mod correlation;
pub mod error;
pub mod format;
pub mod fredholm;
pub mod model;
pub mod numerics;
pub mod solver;
pub mod synthgen;

pub use error::{DppError, Result};
