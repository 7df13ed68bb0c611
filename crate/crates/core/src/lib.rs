pub mod audit;
pub mod cli;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod ingest;
pub mod kernel;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod parallel;

pub use error::{Error, Result};
