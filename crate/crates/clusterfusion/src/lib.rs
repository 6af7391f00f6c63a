//! Simulation harness, file formats and command line for `clusterfusion-core`.

pub mod backend;
pub mod cli;
mod error;
pub mod harness;
pub mod io;
pub mod plot;

pub use error::{Error, Result};
