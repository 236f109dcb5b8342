pub mod cli;
pub mod criteria;
pub mod data;
pub mod error;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod measure;
pub mod optimize;
pub mod simulation;
pub mod step;
pub mod survival;

pub use error::{Error, Result};
