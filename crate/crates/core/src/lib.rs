//! Decoder transformer with downward connections from higher layers of one
//! token group to lower layers of the next, together with the synthetic
//! reasoning tasks, training loop and evaluation used to study it.

pub mod analysis;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numcore;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
