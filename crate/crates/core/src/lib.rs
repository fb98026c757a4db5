//! Learned visual prompts that steer the class-token attention of a frozen
//! vision transformer toward the prompt's insertion site.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
mod nn;
pub mod prior;
pub mod target;
pub mod training;
pub mod workbench;

pub use error::{Error, Result};
