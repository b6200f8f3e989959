pub mod cli;
pub mod corruption;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{Result, SundaeError};
