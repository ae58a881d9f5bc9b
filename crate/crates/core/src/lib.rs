pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod image;
pub mod losses;
pub mod netblocks;
pub mod srstore;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
